"""Experiment orchestration: data loading, training runs, checkpoints and reports.

A run directory holds ``config.txt``, ``vocab.txt`` (text models),
``metrics.jsonl`` (append-only), ``metrics.csv``, ``final.ivae``/``best.ivae``
with their ``.cfg`` siblings, ``record.json`` and ``curves.png``.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import CheckpointError, load_checkpoint, read_kv, save_checkpoint, write_kv
from .config import ConfigError, RunConfig
from .data import (LabeledCorpus, SyntheticSpec, Vocab, build_vocab, detokenize, encode_corpus,
                   generate_synthetic_text, generate_synthetic_vectors, read_lines, tokenize, write_lines)
from .distributions import ISOTROPIC
from .downstream import ClassifierConfig, TextClassifier, classify, few_shot, robustness_eval, split_indices
from .metrics import (LMConfig, MetricReport, active_units, agreement, bleu_n, forward_reverse_perplexity,
                      impute, posterior_shape, rouge_n)
from .models import SeqVae, VectorVae, untie_warm_start
from .trainer import VectorData, evaluate, fit, posterior_means, posterior_samples, restore, snapshot, stream

log = logging.getLogger(__name__)


class RunExists(FileExistsError):
    pass


# -- data --------------------------------------------------------------------------------------

@dataclass
class Dataset:
    kind: str
    train: object
    dev: object
    test: object
    vocab: Vocab | None = None
    train_labels: np.ndarray | None = None
    dev_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    def references(self, split: str = "test") -> list[str]:
        corpus = getattr(self, split)
        return [detokenize(self.vocab.decode(s)) for s in corpus.sentences]


def _split_off(texts, labels, seed):
    n = len(texts)
    order = np.random.default_rng([seed, 3]).permutation(n)
    k = max(1, n // 10)
    parts = (order[2 * k:], order[:k], order[k:2 * k])
    pick = lambda idx, xs: None if xs is None else [xs[i] for i in sorted(idx)]  # noqa: E731
    return [(pick(p, texts), pick(p, labels)) for p in parts]


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.model == "vector":
        x, y, protos = generate_synthetic_vectors(cfg.vector_train, cfg.vector_dim, cfg.vector_classes,
                                                  cfg.vector_noise, seed=[cfg.seed, 0])
        xd, yd, _ = generate_synthetic_vectors(cfg.vector_dev, cfg.vector_dim, cfg.vector_classes, cfg.vector_noise,
                                               seed=[cfg.seed, 1], prototypes=protos)
        xt, yt, _ = generate_synthetic_vectors(cfg.vector_test, cfg.vector_dim, cfg.vector_classes, cfg.vector_noise,
                                               seed=[cfg.seed, 2], prototypes=protos)
        return Dataset("vector", VectorData(x), VectorData(xd), VectorData(xt), None, y, yd, yt)

    if cfg.data:
        texts, labels = read_lines(cfg.data, cfg.labeled)
        if cfg.dev_data and cfg.test_data:
            splits = [(texts, labels), read_lines(cfg.dev_data, cfg.labeled), read_lines(cfg.test_data, cfg.labeled)]
        else:
            splits = _split_off(texts, labels, cfg.seed)
    else:
        spec = SyntheticSpec()
        if cfg.synthetic:
            try:
                spec = SyntheticSpec.from_mapping(read_kv(cfg.synthetic))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"synthetic spec: {exc}") from None
        sc = generate_synthetic_text(spec)
        splits = [sc.split("train"), sc.split("dev"), sc.split("test")]
    vocab = build_vocab(splits[0][0], cfg.min_freq, cfg.max_vocab)
    label_index = None
    if splits[0][1] is not None:
        label_index = {lab: i for i, lab in enumerate(sorted(set(splits[0][1]), key=str))}
    corpora = []
    for name, (texts, labels) in zip(("train", "dev", "test"), splits):
        if labels is not None and any(lab not in label_index for lab in labels):
            raise ValueError(f"{name} split has labels unseen in training")
        corpora.append(encode_corpus(vocab, texts, labels, name, label_index))
    lab = [None if c.labels is None else np.asarray(c.labels) for c in corpora]
    return Dataset("seq", *corpora, vocab, *lab)


def steps_per_epoch(cfg: RunConfig, data: Dataset) -> int:
    return -(-len(data.train) // cfg.batch_size)


def build_model(cfg: RunConfig, data: Dataset):
    spe = steps_per_epoch(cfg, data)
    try:
        if data.kind == "vector":
            return VectorVae(cfg.vector_model_config(spe), rng=stream(cfg.seed, "init"))
        return SeqVae(cfg.seq_model_config(len(data.vocab), spe), rng=stream(cfg.seed, "init"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _model_cfg_mapping(model) -> dict:
    c = model.config
    out = {k: v for k, v in asdict(c).items() if k != "objective"}
    out.update({f"objective.{k}": v for k, v in asdict(c.objective).items()})
    out["class"] = type(model).__name__
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in out.items()}


def save_model(model, path) -> None:
    save_checkpoint(path, {k: v.data for k, v in model.params.items()}, _model_cfg_mapping(model))


def load_into(model, path) -> None:
    arrays = load_checkpoint(path)
    expected = {k: v.shape for k, v in model.params.items()}
    got = {k: v.shape for k, v in arrays.items()}
    if expected != got:
        raise CheckpointError(f"{path}: checkpoint does not match the configured model")
    restore(model, arrays)


# -- evaluation --------------------------------------------------------------------------------

def evaluate_model(model, data: Dataset, seed: int, split: str = "test") -> dict[str, float]:
    """Headline scalars on ``split``: losses, AU (training means), shape, reconstruction quality."""
    corpus = getattr(data, split)
    _, rec, kl = evaluate(model, corpus, seed=seed)
    out = {"rec_loss": rec, "kl": kl}
    out["au"] = active_units(posterior_means(model, data.train))
    samples = posterior_samples(model, data.train, seed=seed)
    try:
        out["mu_norm_sq"], out["logdetcov"] = posterior_shape(samples)
    except np.linalg.LinAlgError:
        log.warning("aggregated posterior covariance is singular; shape statistics skipped")
    if data.kind == "seq":
        refs = data.references(split)
        hyps = reconstruct(model, corpus.sentences, data.vocab)
        out["bleu2"] = bleu_n(hyps, refs, 2)
        out["bleu4"] = bleu_n(hyps, refs, 4)
        out["rouge2"] = rouge_n(hyps, refs, 2)
        r4 = rouge_n(hyps, refs, 4, return_skipped=True)
        out["rouge4"] = r4.score
        out["rouge4_skipped"] = float(r4.skipped)
    return out


def reconstruct(model: SeqVae, sentences, vocab: Vocab, batch_size: int = 256) -> list[str]:
    """Greedy decodes from posterior means."""
    out = []
    for s in range(0, len(sentences), batch_size):
        chunk = [list(x) for x in sentences[s:s + batch_size]]
        means = model.encode(chunk).mean.data
        out.extend(detokenize(vocab.decode(ids)) for ids in model.greedy_decode(means))
    return out


# -- runs -----------------------------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    run_dir: str
    config: dict
    epochs: list[dict] = field(default_factory=list)
    final_checkpoint: str = ""
    best_checkpoint: str = ""
    best_epoch: int | None = None
    early_stopped: bool = False
    wall_clock: float = 0.0
    warm_start_from: str | None = None
    test_best: dict = field(default_factory=dict)
    test_final: dict = field(default_factory=dict)

    def save(self) -> None:
        Path(self.run_dir, "record.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        return cls(**json.loads(Path(run_dir, "record.json").read_text()))


def prepare_run_dir(root, run_id: str, force: bool) -> Path:
    run_dir = Path(root) / run_id
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise RunExists(f"{run_dir} exists; pass force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def append_jsonl(path, obj) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write((obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True)) + "\n")


def train(cfg: RunConfig, force: bool = False, init_params: dict | None = None,
          warm_start_from: str | None = None, figures: bool = True) -> RunRecord:
    """Train one configuration end to end and write its run directory."""
    data = load_data(cfg)
    model = build_model(cfg, data)
    if init_params is not None:
        restore(model, init_params)
    run_dir = prepare_run_dir(cfg.output_root(), cfg.run_id, force)
    write_kv(run_dir / "config.txt", cfg.to_mapping())
    if data.vocab is not None:
        data.vocab.save(run_dir / "vocab.txt")
    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.touch()
    record = RunRecord(cfg.run_id, str(run_dir), cfg.to_mapping(), warm_start_from=warm_start_from)

    def on_epoch(stats):
        row = {"kind": "epoch", **asdict(stats)}
        record.epochs.append(row)
        append_jsonl(metrics_path, row)

    t0 = time.perf_counter()
    result = fit(model, data.train, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, dev=data.dev,
                 clip=cfg.clip, on_epoch=on_epoch)
    record.wall_clock = time.perf_counter() - t0

    final_path, best_path = run_dir / "final.ivae", run_dir / "best.ivae"
    save_model(model, final_path)
    final_params = snapshot(model)
    record.test_final = evaluate_model(model, data, cfg.seed)
    if result.best_params is not None:
        restore(model, result.best_params)
    save_model(model, best_path)
    record.best_epoch = result.best_epoch
    record.test_best = evaluate_model(model, data, cfg.seed)
    restore(model, final_params)
    record.final_checkpoint, record.best_checkpoint = str(final_path), str(best_path)

    for kind, scalars in (("test_best", record.test_best), ("test_final", record.test_final)):
        rep = MetricReport(cfg.run_id, scalars, cfg.seed, None, kind)
        rep.validate(cfg.latent_dim)
        append_jsonl(metrics_path, rep.to_json())
    write_epoch_csv(run_dir / "metrics.csv", record.epochs)
    record.save()
    if figures:
        plotting.training_curves(record.epochs, run_dir / "curves.png", target_c=cfg.target_c)
    return record


def write_epoch_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def load_run(run_dir, which: str = "best"):
    """Rebuild ``(config, model, data)`` for a finished run."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_file(run_dir / "config.txt")
    data = load_data(cfg)
    if data.vocab is not None and (run_dir / "vocab.txt").exists():
        saved = Vocab.load(run_dir / "vocab.txt")
        if saved.itos != data.vocab.itos:
            raise CheckpointError(f"{run_dir}: vocabulary differs from the one rebuilt from config")
    model = build_model(cfg, data)
    load_into(model, run_dir / f"{which}.ivae")
    return cfg, model, data


def eval_command(run_dir, which: str = "best") -> MetricReport:
    cfg, model, data = load_run(run_dir, which)
    rep = MetricReport(cfg.run_id, evaluate_model(model, data, cfg.seed), cfg.seed, None, f"eval_{which}")
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return rep


def sample_prior(model, n: int, rng) -> np.ndarray:
    d = model.latent_dim
    prior = model.prior
    if prior.kind == "standard_normal":
        return rng.standard_normal((n, d))
    comp = rng.integers(prior.n_components, size=n)
    sd = np.broadcast_to(np.exp(0.5 * prior.log_vars.data), prior.means.shape)
    return prior.means.data[comp] + sd[comp] * rng.standard_normal((n, d))


def generate(run_dir, n: int, seed: int = 0, out=None, which: str = "best") -> list[str]:
    """Decode ``n`` sentences from prior draws; written one per line."""
    cfg, model, data = load_run(run_dir, which)
    if data.kind != "seq":
        raise ConfigError("generate needs a sequence model")
    z = sample_prior(model, n, np.random.default_rng([seed, 17]))
    lines = []
    for s in range(0, n, 256):
        lines.extend(detokenize(data.vocab.decode(ids)) for ids in model.greedy_decode(z[s:s + 256]))
    out = Path(out) if out else Path(run_dir) / "generated.txt"
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return lines


def impute_command(run_dir, keep_fraction: float = 0.25, out=None, which: str = "best"):
    """Encode each test-sentence prefix and reconstruct; returns (rows, bleu2)."""
    cfg, model, data = load_run(run_dir, which)
    if data.kind != "seq":
        raise ConfigError("impute needs a sequence model")
    originals = data.test.sentences
    prefixes = [impute(s, keep_fraction) for s in originals]
    recon = reconstruct(model, prefixes, data.vocab)
    refs = data.references("test")
    rows = [(refs[i], detokenize(data.vocab.decode(prefixes[i])), recon[i]) for i in range(len(originals))]
    score = bleu_n(recon, refs, 2)
    out = Path(out) if out else Path(run_dir) / "impute.tsv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("original\timputed\treconstruction\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    rep = MetricReport(cfg.run_id, {"impute_bleu2": score, "keep_fraction": keep_fraction}, cfg.seed, None, "impute")
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return rows, score


def _labels_or_fail(data: Dataset, split: str) -> np.ndarray:
    labels = getattr(data, f"{split}_labels")
    if labels is None:
        raise ConfigError("this command needs labeled data (labeled=true or a synthetic corpus)")
    return labels


def classify_command(run_dir, config: ClassifierConfig | None = None, seed: int = 0, which: str = "best",
                     split: str = "train"):
    """Probe accuracy on an 80/20 split of one labeled split's posterior means."""
    cfg, model, data = load_run(run_dir, which)
    labels = _labels_or_fail(data, split)
    res = classify(posterior_means(model, getattr(data, split)), labels, config, seed)
    rep = MetricReport(cfg.run_id, {"accuracy": res.mean, "accuracy_std": res.std}, seed, None, "classify")
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return res


def robustness_command(run_dir, rate: float = 0.3, config: ClassifierConfig | None = None, seed: int = 0,
                       which: str = "best", split: str = "train") -> float:
    """Clean-trained probes evaluated on word-dropped versions of the held-out representations."""
    cfg, model, data = load_run(run_dir, which)
    if data.kind != "seq":
        raise ConfigError("robustness needs a sequence model")
    labels = _labels_or_fail(data, split)
    config = config or ClassifierConfig()
    corpus = getattr(data, split)
    res = classify(posterior_means(model, corpus), labels, config, seed)
    held_out = corpus.subset(res.test_index)
    accs = [robustness_eval(model, clf, held_out, rate, seed) for clf in res.classifiers]
    acc = float(np.mean(accs))
    rep = MetricReport(cfg.run_id, {"robustness_acc": acc, "robustness_std": float(np.std(accs)),
                                    "clean_acc": res.mean, "dropout_rate": rate}, seed, None, "robustness")
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return acc


def agreement_command(run_dir, seed: int = 0, epochs: int = 5, which: str = "best") -> float:
    cfg, model, data = load_run(run_dir, which)
    if data.kind != "seq":
        raise ConfigError("agreement needs a sequence model")
    labels = _labels_or_fail(data, "test")
    n_classes = int(max(data.train_labels.max(), labels.max())) + 1
    clf = TextClassifier(len(data.vocab), n_classes, rng=np.random.default_rng([seed, 19]))
    clf.fit(data.train, epochs=epochs, seed=seed)
    recon = reconstruct(model, data.test.sentences, data.vocab)
    recon_ids = [data.vocab.encode(tokenize(s)) for s in recon]
    ratio = agreement(clf, recon_ids, data.test.sentences, labels)
    rep = MetricReport(cfg.run_id, {"agreement": ratio}, seed, None, "agreement")
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return ratio


def perplexity_command(run_dir, n: int = 2000, seed: int = 0, lm_config: LMConfig | None = None,
                       which: str = "best"):
    cfg, model, data = load_run(run_dir, which)
    lines = generate(run_dir, n, seed, Path(run_dir) / "generated.txt", which)
    gen = encode_corpus(data.vocab, [ln for ln in lines if ln.strip()], split="generated")
    fwd, rev = forward_reverse_perplexity(data.train, data.test, gen, len(data.vocab), lm_config, seed)
    rep = MetricReport(cfg.run_id, {"fwd_ppl": fwd, "rev_ppl": rev, "n_generated": float(len(gen))}, seed,
                       None, "perplexity")
    rep.validate()
    append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return fwd, rev


def fewshot_command(run_dir, fractions=(0.001, 0.01, 0.1, 1.0), config: ClassifierConfig | None = None,
                    seed: int = 0):
    """Retrain the run's configuration on nested subsamples and probe each encoder."""
    cfg, _, data = load_run(run_dir, "final")
    if data.kind != "seq":
        raise ConfigError("fewshot needs a sequence model")
    _labels_or_fail(data, "train")

    def pipeline(subset: LabeledCorpus, s: int):
        model = build_model(cfg, data)
        fit(model, subset, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, clip=cfg.clip)
        return model

    results = few_shot(data.train, data.test, pipeline, fractions, seed, config)
    for f, res in results.items():
        rep = MetricReport(cfg.run_id, {"fraction": f, "accuracy": res.mean, "accuracy_std": res.std}, seed,
                           None, "fewshot")
        append_jsonl(Path(run_dir) / "metrics.jsonl", rep.to_json())
    return results


def warm_start_command(base_run_dir, target_c: float = 5.0, run_id: str | None = None, epochs: int | None = None,
                       force: bool = False, figures: bool = True) -> RunRecord:
    """Untie a trained isotropic run into a diagonal model and keep training it with target ``C``."""
    base_cfg, base_model, _ = load_run(base_run_dir, "final")
    if base_model.geometry != ISOTROPIC:
        raise ConfigError(f"{base_run_dir} is not an isotropic run")
    warm = untie_warm_start(base_model)
    cfg = base_cfg.replace(geometry="diagonal", objective="constrained", target_c=target_c, c_warmup_steps=0,
                           run_id=run_id or f"{base_cfg.run_id}-untied",
                           epochs=epochs if epochs is not None else base_cfg.epochs)
    return train(cfg, force=force, init_params=snapshot(warm), warm_start_from=str(base_run_dir), figures=figures)


# -- sweeps --------------------------------------------------------------------------------------------

SWEEP_SCALARS = ("rec_loss", "kl", "au", "train_kl", "bleu2", "logdetcov", "mu_norm_sq")


def _cell_id(base: str, cell: dict, seed: int) -> str:
    parts = [f"{k}={v}" for k, v in cell.items()]
    return "-".join([base, *parts, f"s{seed}"])


def _run_child(args):
    cfg_map, force, figures = args
    cfg = RunConfig.from_mapping(cfg_map)
    try:
        rec = train(cfg, force=force, figures=figures)
        out = dict(rec.test_best)
        out["train_kl"] = rec.epochs[-1]["kl"]
        out["train_rec_loss"] = rec.epochs[-1]["rec_loss"]
        return cfg.run_id, out, None
    except Exception as exc:  # child failures are recorded and the sweep continues
        return cfg.run_id, None, f"{type(exc).__name__}: {exc}"


@dataclass
class SweepResult:
    rows: list[dict]
    children: dict[str, dict | None]
    failures: dict[str, str]
    out_dir: str


def sweep(base: RunConfig, axes: dict[str, list], seeds=(0, 1, 2), force: bool = False, parallel: int = 1,
          figures: bool = True, name: str | None = None) -> SweepResult:
    """Run the grid ``axes`` x ``seeds`` and aggregate mean/std per cell."""
    keys = list(axes)
    cells = [dict(zip(keys, vals)) for vals in product(*(axes[k] for k in keys))]
    jobs, index = [], []
    for cell in cells:
        for s in seeds:
            cfg = base.replace(**{k: str(v) for k, v in cell.items()}, seed=str(s),
                               run_id=_cell_id(base.run_id, cell, s))
            jobs.append((cfg.to_mapping(), force, figures))
            index.append((cell, s, cfg.run_id))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            outputs = list(ex.map(_run_child, jobs))
    else:
        outputs = [_run_child(j) for j in jobs]
    children = {rid: res for rid, res, _ in outputs}
    failures = {rid: err for rid, _, err in outputs if err}
    rows = []
    for cell in cells:
        runs = [children[rid] for c, s, rid in index if c == cell and children.get(rid)]
        row = {**{k: str(v) for k, v in cell.items()}, "n": len(runs)}
        for key in SWEEP_SCALARS:
            vals = [r[key] for r in runs if key in r]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{key}_std"] = float(np.std(vals)) if vals else float("nan")
        rows.append(row)
    out_dir = Path(base.output_root()) / (name or f"{base.run_id}-sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out_dir / "sweep.json").write_text(json.dumps(
        {"axes": {k: [str(v) for v in vs] for k, vs in axes.items()}, "seeds": list(seeds), "rows": rows,
         "children": children, "failures": failures}, indent=2, sort_keys=True))
    if figures:
        plotting.sweep_summary(rows, keys, out_dir / "sweep.png")
    return SweepResult(rows, children, failures, str(out_dir))
