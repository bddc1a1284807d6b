"""Training loop, leave-one-domain-out evaluation and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, restore_params, save_checkpoint
from .config import RunConfig, Toggles, TrainConfig
from .data import Dataset, DomainSample, leave_one_out_splits, load_dataset, stack
from .decoder import predict_mask
from .errors import InvalidInputError, NumericFailureError
from .losses import loss_terms
from .metrics import asd, dsc
from .model import bank_parameter_count, forward, init_model
from .params import ParameterStore, partition_parameters, seed_for

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_FIELDS = ("epoch", "step", "lr", "loss", "ce", "dice", "val_dsc")
EVAL_BATCH = 32


def fmt6(x) -> str:
    """6 significant digits; empty for missing values."""
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def fmt_full(x) -> str:
    """Round-trip float formatting for reports that get recomputed downstream."""
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# ------------------------------------------------------------------ schedule
def warmup_lr(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warm-up to ``base_lr`` then polynomial (power 0.9) decay to 0 at ``total_steps``.

    The decay clock starts when warm-up ends, so the schedule is continuous.
    """
    if step < 0:
        raise InvalidInputError("step must be >= 0")
    w = config.warmup_steps
    if step < w:
        return config.base_lr * (step + 1) / w
    span = total_steps - w
    if span <= 0:
        return 0.0
    frac = min(max((step - w) / span, 0.0), 1.0)
    return config.base_lr * (1.0 - frac) ** 0.9


# ------------------------------------------------------------------ helpers
def split_source(samples: list[DomainSample], train: TrainConfig) -> tuple[list[DomainSample], list[DomainSample]]:
    """Hold out ``val_fraction`` of the source domain (seeded) for checkpoint selection."""
    n = len(samples)
    n_val = int(round(train.val_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if train.val_fraction > 0 and n > 1 else 0), n - 1)
    perm = np.random.default_rng(seed_for(train.seed, "val-split")).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    return [s for i, s in enumerate(samples) if i not in val_idx], [s for i, s in enumerate(samples) if i in val_idx]


def _trainable_tensors(params: ParameterStore) -> list[torch.Tensor]:
    _, trainable = partition_parameters(params)
    return [params[n] for n in trainable]


def make_optimizer(params: ParameterStore, train: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the trainable partition only; frozen arrays never see weight decay."""
    return torch.optim.AdamW(
        _trainable_tensors(params), lr=train.base_lr, betas=BETAS, eps=ADAM_EPS,
        weight_decay=train.weight_decay, foreach=False,
    )


def optimizer_slots(opt: torch.optim.Optimizer, params: ParameterStore) -> dict[str, dict[str, np.ndarray]]:
    by_id = {id(t): n for n, t in params.items()}
    out = {}
    for tensor, state in opt.state.items():
        out[by_id[id(tensor)]] = {k: v.detach().cpu().numpy().copy() for k, v in state.items()}
    return out


def load_optimizer_slots(opt: torch.optim.Optimizer, params: ParameterStore, slots) -> None:
    for name, state in slots.items():
        opt.state[params[name]] = {k: torch.from_numpy(np.array(v)) for k, v in state.items()}


@torch.no_grad()
def predict_labels(samples: list[DomainSample], params: ParameterStore, config: RunConfig) -> np.ndarray:
    out = []
    for start in range(0, len(samples), EVAL_BATCH):
        images, _ = stack(samples[start:start + EVAL_BATCH])
        out.append(predict_mask(forward(images, params, config.encoder, config.train)))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def mean_dsc(samples, params, config) -> float:
    preds = predict_labels(samples, params, config)
    K = config.encoder.num_labels
    return float(np.mean([[dsc(p, s.mask, k) for k in range(1, K)] for p, s in zip(preds, samples)]))


def _check_compatible(config: RunConfig, data: Dataset) -> None:
    enc = config.encoder
    if data.image_size != enc.image_size:
        raise InvalidInputError(f"dataset image size {data.image_size} != encoder image_size {enc.image_size}")
    if data.num_labels != enc.num_labels:
        raise InvalidInputError(f"dataset has {data.num_labels} labels, encoder expects {enc.num_labels}")


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    out_dir: Path
    history: list[dict] = field(default_factory=list)
    best_val: float | None = None

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / "best.ckpt"

    @property
    def final_checkpoint(self) -> Path:
        return self.out_dir / "final.ckpt"


def train(config: RunConfig, dataset_path, out_path, *, resume_from=None, dataset: Dataset | None = None) -> TrainResult:
    """Train the toggled model on ``config.train.train_domain`` until ``stop_epoch``.

    Writes ``best.ckpt`` on every source-validation improvement, ``last.ckpt``
    after every epoch, ``final.ckpt`` at the end, and appends one row per
    epoch to ``log.csv``. ``resume_from`` continues from a saved ``last.ckpt``.
    """
    tc = config.train
    data = dataset if dataset is not None else load_dataset(dataset_path)
    _check_compatible(config, data)
    source, _ = leave_one_out_splits(data.domains, tc.train_domain)
    train_set, val_set = split_source(source, tc)
    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total_steps = tc.max_epochs * steps_per_epoch

    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    params = init_model(config.encoder, tc)
    opt = make_optimizer(params, tc)
    order_rng = np.random.default_rng(seed_for(tc.seed, "data-order"))
    start_epoch, step, best = 0, 0, None
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        restore_params(params, ck.params)
        load_optimizer_slots(opt, params, ck.optimizer)
        order_rng.bit_generator.state = ck.rng_state
        start_epoch, step, best = ck.epoch, ck.step, ck.best_val

    log_path = out / "log.csv"
    if not log_path.exists() or resume_from is None:
        log_path.write_text(",".join(LOG_FIELDS) + "\n")

    result = TrainResult(out, best_val=best)
    images_all, masks_all = stack(train_set)
    for epoch in range(start_epoch, tc.stop_epoch):
        sums = np.zeros(3)
        n_steps = 0
        lr = 0.0
        perm = order_rng.permutation(len(train_set))
        for start in range(0, len(train_set), tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            lr = warmup_lr(step, tc, total_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            logits = forward(images_all[idx], params, config.encoder, tc)
            total, ce, dice = loss_terms(logits, masks_all[idx], tc.loss)
            if not torch.isfinite(total):
                raise NumericFailureError(
                    f"non-finite loss at epoch {epoch + 1}, step {step}: total={float(total)}, ce={float(ce)}, dice={float(dice)}"
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sums += (total.item(), ce.item(), dice.item())
            n_steps += 1
            step += 1
        val = mean_dsc(val_set, params, config) if val_set else None
        row = dict(zip(LOG_FIELDS, (epoch + 1, step, lr, *(sums / max(n_steps, 1)), val)))
        result.history.append(row)
        with log_path.open("a") as fh:
            fh.write(",".join(fmt6(row[k]) if k not in ("epoch", "step") else str(row[k]) for k in LOG_FIELDS) + "\n")
        log.info("epoch %d step %d loss %.5f val_dsc %s", epoch + 1, step, row["loss"], fmt6(val))

        ckpt = Checkpoint(params, config, epoch + 1, step, optimizer_slots(opt, params),
                          order_rng.bit_generator.state, best)
        if val is not None and (best is None or val > best):
            best = val
            ckpt.best_val = best
            save_checkpoint(out / "best.ckpt", ckpt)
        save_checkpoint(out / "last.ckpt", ckpt)

    final = Checkpoint(params, config, max(tc.stop_epoch, start_epoch), step, optimizer_slots(opt, params),
                       order_rng.bit_generator.state, best)
    save_checkpoint(out / "final.ckpt", final)
    if not (out / "best.ckpt").exists():
        save_checkpoint(out / "best.ckpt", final)
    result.best_val = best
    return result


# ------------------------------------------------------------------ evaluation
SAMPLE_FIELDS = ("domain", "split", "sample", "label", "dsc", "asd")


@dataclass
class EvalReport:
    train_domain: str
    test_domains: list[str]
    num_labels: int
    rows: list[dict]  # one per (domain, sample, label)
    domain_means: dict[str, dict[str, float]]  # domain -> metric name -> value
    average: dict[str, float]


def _summarise(rows, domain, K):
    mine = [r for r in rows if r["domain"] == domain]
    out = {}
    for k in range(1, K):
        lab = [r for r in mine if r["label"] == k]
        out[f"DSC_label{k}"] = float(np.mean([r["dsc"] for r in lab]))
        asds = np.array([r["asd"] for r in lab], dtype=np.float64)
        out[f"ASD_label{k}"] = float(np.nanmean(asds)) if np.isfinite(asds).any() else math.nan
    out["DSC"] = float(np.mean([out[f"DSC_label{k}"] for k in range(1, K)]))
    asd_means = [out[f"ASD_label{k}"] for k in range(1, K) if not math.isnan(out[f"ASD_label{k}"])]
    out["ASD"] = float(np.mean(asd_means)) if asd_means else math.nan
    return out


def evaluate(checkpoint_path, dataset_path, report_path, *, train_domain: str | None = None,
             dataset: Dataset | None = None) -> EvalReport:
    """Score a checkpoint on every domain of a suite.

    The train domain yields in-distribution rows; every other domain is an
    out-of-domain test set. ``Average`` is the unweighted mean of the test
    domains' means. Writes the per-sample CSV at ``report_path`` and a wide
    summary next to it (``<stem>_summary.csv``).
    """
    ck = load_checkpoint(checkpoint_path)
    config = ck.config
    data = dataset if dataset is not None else load_dataset(dataset_path)
    _check_compatible(config, data)
    train_domain = train_domain or config.train.train_domain
    source, tests = leave_one_out_splits(data.domains, train_domain)
    params = ck.params
    K = config.encoder.num_labels

    rows = []
    for name, samples in data.domains.items():
        split = "intra" if name == train_domain else "test"
        preds = predict_labels(samples, params, config)
        for pred, s in zip(preds, samples):
            for k in range(1, K):
                rows.append(dict(domain=name, split=split, sample=s.index, label=k,
                                 dsc=dsc(pred, s.mask, k), asd=asd(pred, s.mask, k, s.spacing)))
    means = {name: _summarise(rows, name, K) for name in data.domains}
    metrics = list(means[train_domain])
    test_names = list(tests)
    average = {}
    for m in metrics:
        vals = [means[d][m] for d in test_names if not math.isnan(means[d][m])]
        average[m] = float(np.mean(vals)) if vals else math.nan
    report = EvalReport(train_domain, test_names, K, rows, means, average)
    write_report(report, report_path)
    return report


def summary_path(report_path) -> Path:
    p = Path(report_path)
    return p.with_name(f"{p.stem}_summary{p.suffix or '.csv'}")


def write_report(report: EvalReport, report_path) -> None:
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with report_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_FIELDS)
        for r in report.rows:
            w.writerow([r["domain"], r["split"], r["sample"], r["label"], fmt_full(r["dsc"]), fmt_full(r["asd"])])
    metrics = list(report.average)
    intra = f"Intra-{report.train_domain}"
    with summary_path(report_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *report.test_domains, "Average", intra])
        for m in metrics:
            w.writerow([m, *(fmt_full(report.domain_means[d][m]) for d in report.test_domains),
                        fmt_full(report.average[m]), fmt_full(report.domain_means[report.train_domain][m])])


def read_summary(report_path) -> dict[str, dict[str, float]]:
    """Parse a summary CSV into ``{metric: {column: value}}`` (missing cells -> NaN)."""
    with summary_path(report_path).open() as fh:
        reader = csv.DictReader(fh)
        return {row["metric"]: {k: float(v) if v else math.nan for k, v in row.items() if k != "metric"} for row in reader}


def read_sample_rows(report_path) -> list[dict]:
    with Path(report_path).open() as fh:
        return [
            dict(domain=r["domain"], split=r["split"], sample=int(r["sample"]), label=int(r["label"]),
                 dsc=float(r["dsc"]), asd=float(r["asd"]) if r["asd"] else math.nan)
            for r in csv.DictReader(fh)
        ]


# ------------------------------------------------------------------ ablations
COMPONENT_ROWS = (
    ("baseline", Toggles(False, False, False)),
    ("+LLFI", Toggles(True, False, False)),
    ("+Filter", Toggles(False, True, False)),
    ("+LLFI+Filter", Toggles(True, True, False)),
    ("+PPG", Toggles(False, False, True)),
    ("full", Toggles(True, True, True)),
)
BANK_SIZES = (0, 64, 128, 256, 512, 1024, 2048)


@dataclass
class AblationResult:
    components: list[dict]
    bank_sweep: list[dict]
    runs: dict[str, dict]


def _variant(config: RunConfig, toggles: Toggles, bank_size: int) -> RunConfig:
    if not toggles.prompt_generator or bank_size == 0:
        toggles, bank_size = dataclasses.replace(toggles, prompt_generator=False), 0
    return config.replace_train(toggles=toggles, bank_size=bank_size)


def _run_tag(train: TrainConfig) -> str:
    t = train.toggles
    return f"llfi{int(t.low_level_fusion)}_filter{int(t.channel_filter)}_ppg{int(t.prompt_generator)}_n{train.bank_size}"


def ablate(config: RunConfig, dataset_path, out_path, *, bank_sizes=BANK_SIZES) -> AblationResult:
    """Component ablation (six toggle rows) and memory-bank size sweep.

    The bank sweep runs on the plain-adapter baseline plus the prompt
    generator; N=0 disables the generator. Identical variants are trained once.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(dataset_path)
    runs: dict[str, dict] = {}

    def run(variant: RunConfig) -> dict:
        tag = _run_tag(variant.train)
        if tag not in runs:
            rdir = out / "runs" / tag
            res = train(variant, dataset_path, rdir, dataset=data)
            report = evaluate(res.best_checkpoint, dataset_path, rdir / "report.csv", dataset=data)
            params = init_model(variant.encoder, variant.train)
            _, trainable = partition_parameters(params)
            runs[tag] = dict(tag=tag, average=report.average["DSC"], report=report, history=res.history,
                             trainable_params=params.count(trainable), bank_params=bank_parameter_count(params))
        return runs[tag]

    components = []
    for label, toggles in COMPONENT_ROWS:
        r = run(_variant(config, toggles, config.train.bank_size))
        components.append(dict(row=label, baseline=1, LLFI=int(toggles.low_level_fusion), Filter=int(toggles.channel_filter),
                           PPG=int(toggles.prompt_generator), trainable_params=r["trainable_params"], Average=r["average"], run=r["tag"]))
    bank_sweep = []
    for n in bank_sizes:
        r = run(_variant(config, Toggles(False, False, True), n))
        bank_sweep.append(dict(N=n, bank_params=r["bank_params"], trainable_params=r["trainable_params"],
                           Average=r["average"], run=r["tag"]))

    _write_table(out / "components.csv", components,
                 ("row", "baseline", "LLFI", "Filter", "PPG", "trainable_params", "Average", "run"))
    _write_table(out / "bank_size.csv", bank_sweep, ("N", "bank_params", "trainable_params", "Average", "run"))
    return AblationResult(components, bank_sweep, runs)


def _write_table(path: Path, rows: list[dict], fields) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt6(r[f]) if isinstance(r[f], float) else r[f] for f in fields])
