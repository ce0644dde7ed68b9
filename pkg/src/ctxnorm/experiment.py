"""Experiment front end: config, comparison runs, summary emission.

One run trains every requested normalization kind on the same dataset with
the same seed (so all non-norm weights match), writes per-kind curve CSVs
and a summary.json, and keeps partial outputs (plus a FAILED marker) when a
method errors. Methods run sequentially for determinism.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .contexts import assign_contexts, load_context_sidecar
from .datasets import gen_synthetic_gmm, load_csv_dataset, load_mnist_idx
from .nn import NORM_KINDS, build_model, cnn_spec, mlp_spec
from .optim import make_optimizer, make_schedule
from .rng import make_rng
from .train import TrainConfig, evaluate, train

METHOD_ORDER = ("bn", "ln", "modenorm", "mixnorm", "cn", "cnx", "acn")
CONTEXT_KINDS = ("cn", "cnx")


@dataclass
class ExperimentConfig:
    dataset: dict
    norms: list
    context: dict = field(default_factory=dict)
    model: str = "mlp"
    hidden: tuple = (32, 32)
    cnn_channels: int = 16
    cnn_dense_units: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd_momentum", "lr": 0.05})
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    out_dir: str = "report"

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for kind in self.norms:
            if kind not in NORM_KINDS or kind == "none":
                raise ValueError(f"unknown norm kind {kind!r}")
        if self.n_contexts < 1:
            raise ValueError("context count must be >= 1")
        kind = self.dataset.get("kind")
        if kind == "mnist_idx":
            for key in ("images", "labels"):
                if not Path(self.dataset[key]).exists():
                    raise FileNotFoundError(self.dataset[key])
        elif kind == "csv":
            if not Path(self.dataset["path"]).exists():
                raise FileNotFoundError(self.dataset["path"])
        elif kind != "synthetic_gmm":
            raise ValueError(f"unknown dataset kind {kind!r}")
        if "map_file" in self.context and not Path(self.context["map_file"]).exists():
            raise FileNotFoundError(self.context["map_file"])
        return self

    @property
    def n_contexts(self):
        return int(self.context.get("contexts", 1))

    def echo(self):
        payload = {name: getattr(self, name) for name in self.__dataclass_fields__}
        payload["hidden"] = list(self.hidden)
        payload["norms"] = list(self.norms)
        return payload


def load_dataset(config):
    """Materialize the configured dataset. Returns (dataset, true_contexts)."""
    spec = config.dataset
    kind = spec["kind"]
    if kind == "mnist_idx":
        ds = load_mnist_idx(
            spec["images"], spec["labels"], subset_n=spec.get("subset_n"), seed=config.seed
        )
        return ds, None
    if kind == "synthetic_gmm":
        rng = make_rng(spec.get("seed", config.seed))
        ds, true_ids = gen_synthetic_gmm(
            spec["components"], spec["n"], spec["dim"], spec["separation"], rng
        )
        return ds, true_ids
    if kind == "csv":
        return load_csv_dataset(spec["path"]), None
    raise ValueError(f"unknown dataset kind {kind!r}")


def build_context_assignment(config, dataset):
    """Resolve the configured context strategy against a dataset."""
    strategy = config.context.get("strategy")
    if strategy is None:
        return None
    kwargs = {}
    if "map_file" in config.context or "domains_file" in config.context:
        sidecar = config.context.get("map_file", config.context.get("domains_file"))
        kwargs.update(load_context_sidecar(sidecar))
    if "map" in config.context:
        kwargs["class_map"] = {int(k): int(v) for k, v in config.context["map"].items()}
    if strategy == "kmeans":
        kwargs["n_contexts"] = config.n_contexts
        kwargs["rng"] = make_rng(config.seed)
        kwargs["feature_mode"] = config.context.get("features", "flat")
    elif strategy == "superclass":
        kwargs["n_contexts"] = config.context.get("contexts")
    return assign_contexts(dataset, strategy, **kwargs)


def _model_spec(config, dataset, norm_kind):
    contexts = 1 if norm_kind in ("bn", "ln") else config.n_contexts
    if config.model == "mlp":
        input_dim = int(dataset.x[0].size)
        return mlp_spec(
            input_dim,
            dataset.n_classes,
            norm=norm_kind,
            contexts=contexts,
            hidden=tuple(config.hidden),
        )
    if config.model == "small_cnn":
        side = int(round((dataset.x.shape[2]) ** 0.5))
        input_shape = (dataset.x.shape[1], side, side)
        if input_shape[0] * side * side != dataset.x[0].size:
            raise ValueError("small_cnn needs square images")
        return cnn_spec(
            input_shape,
            dataset.n_classes,
            norm=norm_kind,
            contexts=contexts,
            channels=config.cnn_channels,
            dense_units=config.cnn_dense_units,
        )
    raise ValueError(f"unknown model spec {config.model!r}")


def _make_optimizer(config):
    opt = dict(config.optimizer)
    kind = opt.pop("kind", "sgd_momentum")
    schedule_name = opt.pop("schedule", "constant")
    schedule_kwargs = opt.pop("schedule_kwargs", {})
    return make_optimizer(kind, schedule=make_schedule(schedule_name, **schedule_kwargs), **opt)


def run_one_method(config, dataset, ctx_assignment, norm_kind):
    """Train and evaluate a single normalization kind."""
    needs_ctx = norm_kind in CONTEXT_KINDS
    if needs_ctx and ctx_assignment is None:
        raise ValueError(f"{norm_kind} requires a context strategy in the config")
    spec = _model_spec(config, dataset, norm_kind)
    model = build_model(spec, config.seed, context_assignment=ctx_assignment if needs_ctx else None)
    optimizer = _make_optimizer(config)
    tconf = TrainConfig(epochs=config.epochs, batch_size=config.batch_size, seed=config.seed)
    log = train(
        model,
        dataset,
        optimizer,
        tconf,
        ctx_assignment=ctx_assignment if needs_ctx else None,
    )
    ctx_ids = ctx_assignment.ids if needs_ctx else None
    metrics = evaluate(model, dataset, ctx_ids=ctx_ids)
    return model, log, metrics


def run_experiment(config, out_dir=None):
    """Run the whole comparison matrix.

    Writes curves_<kind>.csv per method and summary.json; failures leave a
    FAILED marker naming the broken methods without touching the successful
    ones. Returns (report_dir, failed_kinds).
    """
    config.validate()
    report = Path(out_dir if out_dir is not None else config.out_dir)
    report.mkdir(parents=True, exist_ok=True)
    dataset, _ = load_dataset(config)
    needs_ctx = any(kind in CONTEXT_KINDS for kind in config.norms)
    ctx_assignment = build_context_assignment(config, dataset) if (
        needs_ctx or config.context.get("strategy")
    ) else None

    results = {}
    failed = []
    for kind in config.norms:
        try:
            _, log, metrics = run_one_method(config, dataset, ctx_assignment, kind)
            curve_path = report / f"curves_{kind}.csv"
            log.to_csv(curve_path)
            results[kind] = {
                "status": "ok",
                "final": metrics,
                "curve_file": curve_path.name,
                "epoch_seconds": log.epoch_seconds,
                "contexts": 1 if kind in ("bn", "ln") else config.n_contexts,
                "final_train_loss": (log.last("train") or {}).get("loss"),
                "initial_train_loss": (log.first("train") or {}).get("loss"),
            }
        except Exception as exc:  # noqa: BLE001 - isolate per-method failures
            results[kind] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            failed.append(kind)
    summary = {
        "config": config.echo(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "results": results,
    }
    with open(report / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failed:
        (report / "FAILED").write_text("failed methods: " + ", ".join(failed) + "\n")
    return report, failed


def emit_summary_table(report_dir):
    """Aligned plain-text table of the summary, in fixed method order."""
    path = Path(report_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"no summary.json in {report_dir}")
    with open(path) as fh:
        summary = json.load(fh)
    results = summary["results"]
    header = ("method", "K", "loss", "accuracy", "precision", "recall", "f1", "sec/epoch")
    rows = [header]
    ordered = [k for k in METHOD_ORDER if k in results] + [
        k for k in results if k not in METHOD_ORDER
    ]
    for kind in ordered:
        entry = results[kind]
        if entry.get("status") != "ok":
            rows.append((kind, "-", "FAILED", entry.get("error", ""), "", "", "", ""))
            continue
        final = entry["final"]
        secs = entry.get("epoch_seconds") or []
        mean_secs = sum(secs) / len(secs) if secs else float("nan")
        rows.append(
            (
                kind,
                str(entry.get("contexts", "-")),
                f"{final['loss']:.2f}",
                f"{final['accuracy']:.2f}",
                f"{final['precision']:.2f}",
                f"{final['recall']:.2f}",
                f"{final['f1']:.2f}",
                f"{mean_secs:.3f}",
            )
        )
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
