"""End-to-end experiment runner: generate, pre-train, fine-tune, analyze, report.

An experiment is one declarative JSON config (see data/recipes/ for examples).
All randomness flows from the config's explicit seed. A run directory is
immutable once its manifest is finalized; re-running into it is refused.

Config keys:
    name, seed                   required
    model                        {"preset": "desk"|"8m", ...overrides}
    languages                    {name: {kind, n_types, seq_len, p_open,
                                  block_types, segment_len, n_sequences}}
    text                         optional {path|"sample", name, max_vocab, seq_len}
    pretrain                     optional PretrainConfig overrides
    stages                       optional [{mode, learning_rate, steps, ...}]
    transfer                     optional {"pairs": [[a, b], ...], "modes": [...] }
    analyses                     optional {"spectrum": true, "clusters": [k...],
                                  "cloze": {...}, "probes": {...}}
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

from . import (
    cloze,
    embedding_analysis,
    languages,
    probes,
    textcorpus,
    training,
    transfer,
)
from .corpusfile import read_corpus
from .errors import ConfigurationError
from .manifest import RunManifest, StageTimer, hash_config, sha256_file
from .model import PRESETS, Mode, init_model, load_checkpoint, save_checkpoint
from .training import PretrainConfig, StageConfig

SAMPLE_TEXT = "tiny_text_sample.txt"


def sample_text_path() -> Path:
    return Path(resources.files("bracketlab").joinpath("data", SAMPLE_TEXT))


def recipe_path(name: str) -> Path:
    return Path(resources.files("bracketlab").joinpath("data", "recipes", f"{name}.json"))


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _validate_config(config: dict):
    for key in ("name", "seed"):
        if key not in config:
            raise ConfigurationError(f"config is missing required key {key!r}")
    if not isinstance(config["seed"], int):
        raise ConfigurationError("seed must be an explicit integer")
    if not config.get("languages") and not config.get("text"):
        raise ConfigurationError("config declares neither languages nor text")
    text = config.get("text")
    if text and text.get("path") not in (None, "sample") and not Path(text["path"]).exists():
        raise ConfigurationError(f"text path {text['path']!r} does not exist")


def _language_spec(entry: dict) -> tuple[languages.LanguageSpec, int]:
    entry = dict(entry)
    n_sequences = int(entry.pop("n_sequences"))
    return languages.LanguageSpec(**entry), n_sequences


def _model_config(config: dict, vocab_size: int, max_seq_len: int):
    model_cfg = dict(config.get("model") or {"preset": "desk"})
    preset = model_cfg.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown model preset {preset!r}")
    model_cfg.setdefault("max_seq_len", max_seq_len)
    return PRESETS[preset](vocab_size=vocab_size, **model_cfg)


def _stages(config: dict) -> list[StageConfig]:
    raw = config.get("stages")
    if raw is None:
        return training.default_stages()
    return [StageConfig(**entry) for entry in raw]


def _pretrain_config(config: dict) -> PretrainConfig:
    return PretrainConfig(**(config.get("pretrain") or {}))


def run_experiment(config: dict, out_dir) -> RunManifest:
    _validate_config(config)
    run_dir = Path(out_dir)
    if (run_dir / "run_manifest.json").exists():
        raise ConfigurationError(f"{run_dir} already holds a finalized run")
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(config=config, input_hashes={"config": hash_config(config)})
    seed = config["seed"]
    try:
        _execute(config, run_dir, manifest, seed)
        manifest.status = "complete"
    except Exception as exc:
        manifest.status = "partial"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.save(run_dir)
        raise
    manifest.save(run_dir)
    return manifest


def _execute(config: dict, run_dir: Path, manifest: RunManifest, seed: int):
    corpora_dir = run_dir / "corpora"
    models_dir = run_dir / "pretrained"
    pipelines_dir = run_dir / "pipelines"
    analyses_dir = run_dir / "analyses"

    # corpora
    corpora = {}
    for i, (name, entry) in enumerate(sorted((config.get("languages") or {}).items())):
        spec, n_sequences = _language_spec(entry)
        path = corpora_dir / f"{name}.bin"
        with StageTimer(manifest, f"generate/{name}"):
            languages.generate_corpus(
                spec, n_sequences, languages.sequence_seed(seed, 100 + i), path
            )
        corpora[name] = read_corpus(path)
        manifest.record_output(run_dir, path)

    text_cfg = config.get("text")
    vocab = None
    text_name = None
    feature_table = None
    if text_cfg:
        text_name = text_cfg.get("name", "english")
        source = text_cfg.get("path") or "sample"
        text_path = sample_text_path() if source == "sample" else Path(source)
        manifest.input_hashes["text"] = sha256_file(text_path)
        text = text_path.read_text(encoding="utf-8")
        with StageTimer(manifest, f"encode/{text_name}"):
            vocab = textcorpus.build_vocab(text, max_vocab=text_cfg.get("max_vocab", 500))
            vocab_path = vocab.save(run_dir / "vocab.txt")
            corpus = textcorpus.encode_corpus(
                text, vocab, seq_len=text_cfg.get("seq_len", 128),
                out=corpora_dir / f"{text_name}.bin",
            )
        corpora[text_name] = corpus
        feature_table = textcorpus.extract_features(
            corpus, vocab, min_count=(config.get("analyses", {}).get("probes") or {}).get("min_count", 200)
        )
        features_path = textcorpus.save_features(feature_table, run_dir / "features.tsv")
        manifest.record_output(run_dir, vocab_path)
        manifest.record_output(run_dir, corpora_dir / f"{text_name}.bin")
        manifest.record_output(run_dir, features_path)

    # pre-training (scratch model per language; these double as Full baselines)
    max_seq_len = max(c.seq_len for c in corpora.values())
    pretrain_cfg = _pretrain_config(config)
    baselines = {}
    for i, (name, corpus) in enumerate(sorted(corpora.items())):
        model = init_model(
            _model_config(config, corpus.vocab_size, max_seq_len),
            languages.sequence_seed(seed, 1000 + i),
        )
        with StageTimer(manifest, f"pretrain/{name}"):
            _, report = training.pretrain(model, corpus, pretrain_cfg, seed=languages.sequence_seed(seed, 2000 + i))
        ckpt = save_checkpoint(model, models_dir / name)
        manifest.record_output(run_dir, ckpt)
        baselines[name] = transfer.TransferCell(
            source=name, target=name, mode=Mode.FULL.value,
            nll=report.final_eval_nll, seed=seed,
        )

    # transfer cells from staged pipelines (one pipeline per direction)
    stages = _stages(config)
    transfer_cfg = config.get("transfer") or {}
    pairs = transfer_cfg.get("pairs") or []
    modes = [Mode(m) for m in transfer_cfg.get("modes", ["E", "EL", "ELT"])]
    report = transfer.TransferReport(
        close_threshold=transfer_cfg.get("close_threshold", transfer.CLOSE_THRESHOLD_NATS)
    )
    report.baselines = [baselines[n] for n in sorted(baselines)]
    pipeline_ckpts: dict[tuple[str, str], list[training.StageResult]] = {}
    stage_modes = [s.mode for s in stages]
    for a, b in pairs:
        for src, dst in ((a, b), (b, a)):
            if src not in corpora or dst not in corpora:
                raise ConfigurationError(f"transfer pair references unknown language {src!r}/{dst!r}")
            source_model = load_checkpoint(models_dir / src)
            with StageTimer(manifest, f"transfer/{src}->{dst}"):
                _, results = training.finetune_pipeline(
                    source_model,
                    corpora[dst],
                    stages=stages,
                    seed=languages.sequence_seed(seed, 3000 + len(pipeline_ckpts)),
                    out_dir=pipelines_dir / f"{src}__to__{dst}",
                )
            pipeline_ckpts[(src, dst)] = results
            for result in results:
                if result.stage.mode in modes:
                    report.cells.append(
                        transfer.TransferCell(
                            source=src, target=dst, mode=result.stage.mode.value,
                            nll=result.report.final_eval_nll, seed=seed,
                        )
                    )
                if result.checkpoint_dir:
                    manifest.record_output(run_dir, Path(result.checkpoint_dir))
    for mode in modes:
        for a, b in pairs:
            ab = next((c for c in report.cells if (c.source, c.target, c.mode) == (a, b, mode.value)), None)
            ba = next((c for c in report.cells if (c.source, c.target, c.mode) == (b, a, mode.value)), None)
            if ab and ba:
                report.summaries.append(transfer.pair_summary(ab, ba))
    transfer_path = report.save(run_dir / "transfer.json")
    manifest.record_output(run_dir, transfer_path)

    _run_analyses(
        config, run_dir, manifest, analyses_dir, models_dir,
        pipeline_ckpts, corpora, vocab, text_name, feature_table, seed,
    )


def _run_analyses(
    config, run_dir, manifest, analyses_dir, models_dir,
    pipeline_ckpts, corpora, vocab, text_name, feature_table, seed,
):
    analyses = config.get("analyses") or {}
    if not analyses:
        return

    # models to analyze: fine-tuned-to-text checkpoints when text exists,
    # otherwise the pre-trained synthetic models; scratch model included
    subjects: dict[str, object] = {}
    if text_name is not None:
        for (src, dst), results in pipeline_ckpts.items():
            if dst == text_name:
                for result in results:
                    label = f"{src}_{result.stage.mode.value}"
                    if result.checkpoint_dir:
                        subjects[label] = result.checkpoint_dir
        subjects["scratch"] = str(models_dir / text_name)
    else:
        for name in sorted(corpora):
            subjects[name] = str(models_dir / name)

    if analyses.get("spectrum"):
        embedding_analysis.compare_models(
            subjects, analysis="spectrum",
            out_csv=analyses_dir / "spectrum.csv", out_png=analyses_dir / "spectrum.png",
        )
        manifest.record_output(run_dir, analyses_dir / "spectrum.csv")
        manifest.record_output(run_dir, analyses_dir / "spectrum.png")
    if analyses.get("clusters"):
        k_values = analyses["clusters"] if isinstance(analyses["clusters"], list) else None
        embedding_analysis.compare_models(
            subjects, analysis="clusters", k_values=k_values, seed=seed,
            out_csv=analyses_dir / "clusters.csv", out_png=analyses_dir / "clusters.png",
        )
        manifest.record_output(run_dir, analyses_dir / "clusters.csv")
        manifest.record_output(run_dir, analyses_dir / "clusters.png")

    cloze_cfg = analyses.get("cloze")
    if cloze_cfg and vocab is not None:
        source = (cloze_cfg.get("questions") or "sample") if isinstance(cloze_cfg, dict) else "sample"
        questions = (
            cloze.load_sample_questions() if source == "sample" else cloze.load_questions(source)
        )
        mode = cloze_cfg.get("mode", "full") if isinstance(cloze_cfg, dict) else "full"
        summary = {}
        for label, ckpt in sorted(subjects.items()):
            model = load_checkpoint(ckpt)
            rep = cloze.evaluate(model, vocab, questions, mode=mode)
            path = rep.save(analyses_dir / f"cloze_{label}.json")
            manifest.record_output(run_dir, path)
            summary[label] = rep.overall
        with open(analyses_dir / "cloze_summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
        manifest.record_output(run_dir, analyses_dir / "cloze_summary.json")

    probes_cfg = analyses.get("probes")
    if probes_cfg is not None and feature_table is not None:
        for label, ckpt in sorted(subjects.items()):
            embeddings = embedding_analysis.extract_embeddings(ckpt, which="input")
            results = probes.probe_suite(embeddings, feature_table, seed=seed)
            path = probes.save_results_csv(results, analyses_dir / f"probes_{label}.csv")
            manifest.record_output(run_dir, path)


def report(run_dir) -> str:
    """Human-readable summary of whatever artifacts a run directory holds."""
    run_dir = Path(run_dir)
    sections = []
    warnings = []

    manifest_path = run_dir / "run_manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            m = json.load(fh)
        sections.append(
            f"run {m['config'].get('name', '?')} [{m['status']}] "
            f"tool {m['tool_version']} created {m['created_utc']}"
        )
        if m.get("error"):
            warnings.append(f"run ended early: {m['error']}")
    else:
        warnings.append("no run manifest found")

    transfer_path = run_dir / "transfer.json"
    if transfer_path.exists():
        with open(transfer_path, encoding="utf-8") as fh:
            data = json.load(fh)
        rep = transfer.TransferReport(
            cells=[transfer.TransferCell(**c) for c in data["cells"]],
            baselines=[transfer.TransferCell(**c) for c in data["baselines"]],
            summaries=[transfer.PairSummary(**s) for s in data["summaries"]],
            absent=data.get("absent", []),
            close_threshold=data.get("close_threshold", transfer.CLOSE_THRESHOLD_NATS),
        )
        sections.append("== transfer ==\n" + rep.render_text())
    else:
        warnings.append("transfer report missing")

    cloze_summary = run_dir / "analyses" / "cloze_summary.json"
    if cloze_summary.exists():
        with open(cloze_summary, encoding="utf-8") as fh:
            summary = json.load(fh)
        lines = ["== cloze (macro-average delta, nats) =="]
        for label, value in sorted(summary.items()):
            lines.append(f"  {label:24} {value:8.3f}")
        sections.append("\n".join(lines))
    else:
        warnings.append("cloze summary missing")

    probe_files = sorted((run_dir / "analyses").glob("probes_*.csv")) if (run_dir / "analyses").exists() else []
    if probe_files:
        lines = ["== probes =="]
        for path in probe_files:
            lines.append(f"-- {path.stem.removeprefix('probes_')} --")
            with open(path, encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            body = [r for r in rows[1:] if r and r[0] != "average"]
            tail = [r for r in rows[1:] if r and r[0] == "average"]
            for r in body + tail:
                lines.append(f"  {r[0]:24} {r[1]:8} {r[2]}")
        sections.append("\n".join(lines))
    else:
        warnings.append("probe tables missing")

    for name in ("spectrum.csv", "clusters.csv"):
        path = run_dir / "analyses" / name
        if path.exists():
            sections.append(f"== {name.split('.')[0]} == see {path}")
        else:
            warnings.append(f"{name} missing")

    out = []
    if sections:
        out.extend(sections)
    if warnings:
        out.append("warnings:")
        out.extend(f"  - {w}" for w in warnings)
    if not sections:
        out.insert(0, "empty run directory: nothing to report")
    return "\n\n".join(out)
