"""Training loop, evaluation, ensemble inference and the ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NumericError, Tensor
from .losses import LossReport, disc_loss, gen_adv_loss, seg_ce, total_loss
from .metrics import Confusion, MetricsRow, accumulate, metrics_row
from .nets import (
    DOWNSAMPLE,
    Discriminator,
    Encoder,
    EncoderConfig,
    Head,
    Module,
    config_digest,
    load_checkpoint,
    min_disc_input,
    save_checkpoint,
)
from .optim import SGD, Adam, poly_lr
from .selectors import Selector
from .synthdata import SplitArrays, augment, load_split, SamplePair

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    name: str = "ds2net"
    # ablation flags
    symmetric: bool = True
    feature_align: bool = True
    ddsm: bool = True
    dusm: bool = True
    # adversarial weights
    lambda_Es: float = 0.005
    lambda_Et: float = 0.005
    adv_two_sided: bool = True  # encoders also get gradient through their own-domain feature
    # optimisation
    lr_encoder: float = 0.01
    lr_head: float = 0.02
    lr_disc: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    disc_beta1: float = 0.9
    disc_beta2: float = 0.99
    poly_power: float = 0.9
    iterations: int = 3000
    batch_size: int = 4
    augment: bool = True
    # model
    widths: tuple[int, ...] = (16, 32, 64)
    head_hidden: int = 64
    ddsm_reduced: int = 0  # 0 -> C // 4
    dusm_projected: int = 0  # 0 -> C // 2
    ddsm_zero_init: bool = True  # gates start at 0.5 for every channel and image
    dusm_scaled: bool = True  # impact-mask logits divided by sqrt(H'W')
    image_size: int = 96
    # data and bookkeeping
    source_domain: str = "A"
    target_domain: str = "B"
    seed: int = 0
    eval_interval: int = 500
    log_interval: int = 50
    checkpoint_interval: int = 500

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        conv = dict(d)
        if "widths" in conv:
            conv["widths"] = tuple(int(w) for w in conv["widths"])
        cfg = cls(**conv)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def replace(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    @property
    def run_id(self) -> str:
        return f"{self.name}-s{self.seed}"

    @property
    def channels(self) -> int:
        return self.widths[-1]

    @property
    def reduced(self) -> int:
        return self.ddsm_reduced or max(1, self.channels // 4)

    @property
    def projected(self) -> int:
        return self.dusm_projected or max(1, self.channels // 2)

    @property
    def uses_selector(self) -> bool:
        return self.ddsm or self.dusm

    def validate(self) -> None:
        if self.lambda_Es < 0 or self.lambda_Et < 0:
            raise ConfigError("lambda_Es and lambda_Et must be non-negative")
        if (self.feature_align or self.ddsm or self.dusm) and not self.symmetric:
            raise ConfigError("feature_align, ddsm and dusm need the symmetric dual-encoder model")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError(f"widths must list three positive stage widths, got {self.widths}")
        if self.image_size % DOWNSAMPLE:
            raise ConfigError(f"image_size {self.image_size} not divisible by {DOWNSAMPLE}")
        if self.feature_align and self.image_size // DOWNSAMPLE < min_disc_input():
            raise ConfigError(
                f"feature maps of {self.image_size // DOWNSAMPLE} px are too small for the "
                f"discriminator (needs >= {min_disc_input()}, i.e. image_size >= {min_disc_input() * DOWNSAMPLE})"
            )
        for dom in (self.source_domain, self.target_domain):
            if dom not in ("A", "B"):
                raise ConfigError(f"unknown domain {dom!r}")
        if self.source_domain == self.target_domain and self.symmetric:
            raise ConfigError("source and target domains must differ for the dual-encoder model")
        for key in ("eval_interval", "log_interval", "checkpoint_interval"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")


def _child_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class DS2Net(Module):
    """Dual encoders and heads, the shared selector and two critics.

    With ``symmetric`` off only ``E_s``/``H_s`` exist (plain segmentor). Each
    block draws its initial weights from its own seeded stream, so a block
    starts identically whatever else the configuration enables.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        enc_cfg = EncoderConfig(widths=tuple(cfg.widths))
        width = cfg.channels + cfg.projected
        self.E_s = self.add_child("E_s", Encoder(_child_rng(cfg.seed, "E_s"), enc_cfg))
        self.H_s = self.add_child("H_s", Head(_child_rng(cfg.seed, "H_s"), width, cfg.head_hidden))
        self.E_t = self.H_t = self.selector = self.D_s = self.D_t = None
        if cfg.symmetric:
            self.E_t = self.add_child("E_t", Encoder(_child_rng(cfg.seed, "E_t"), enc_cfg))
            self.H_t = self.add_child("H_t", Head(_child_rng(cfg.seed, "H_t"), width, cfg.head_hidden))
        if cfg.uses_selector:
            rng = _child_rng(cfg.seed, "selector")
            sel = Selector(rng, cfg.channels, cfg.reduced, cfg.projected, cfg.ddsm_zero_init, cfg.dusm_scaled)
            self.selector = self.add_child("selector", sel)
        if cfg.feature_align:
            self.D_s = self.add_child("D_s", Discriminator(_child_rng(cfg.seed, "D_s"), cfg.channels))
            self.D_t = self.add_child("D_t", Discriminator(_child_rng(cfg.seed, "D_t"), cfg.channels))

    def head_inputs(self, f_s: Tensor, f_t: Tensor | None) -> tuple[Tensor, Tensor | None]:
        """Selected (C + C'')-channel inputs for H_s and H_t."""
        cfg = self.cfg
        if self.selector is not None:
            out_s, out_t = self.selector(f_s, f_t, cfg.ddsm, cfg.dusm)
            return out_s.ds2, out_t.ds2
        pad = cfg.projected
        return dc.pad_channels(f_s, pad), None if f_t is None else dc.pad_channels(f_t, pad)

    def group_params(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {"encoder": {}, "head": {}, "disc": {}}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            if top in ("E_s", "E_t", "selector"):
                groups["encoder"][name] = p
            elif top in ("H_s", "H_t"):
                groups["head"][name] = p
            else:
                groups["disc"][name] = p
        return groups


def predict_proba(model: DS2Net, x: Tensor, path: str = "ensemble") -> np.ndarray:
    """Class probabilities N x 2 x H x W along one path or the two-head ensemble."""
    with dc.no_grad():
        if not model.cfg.symmetric:
            if path not in ("s", "ensemble"):
                raise ValueError("single-path model only has the 's' path")
            f_s, _ = model.head_inputs(model.E_s(x), None)
            return dc.softmax(model.H_s(f_s), axis=1).data
        f_ts = model.E_s(x)
        f_tt = model.E_t(x)
        in_s, in_t = model.head_inputs(f_ts, f_tt)
        p_s = dc.softmax(model.H_s(in_s), axis=1).data if path in ("s", "ensemble") else None
        p_t = dc.softmax(model.H_t(in_t), axis=1).data if path in ("t", "ensemble") else None
    if path == "s":
        return p_s
    if path == "t":
        return p_t
    return ensemble_probs(p_t, p_s)


def ensemble_probs(p_tt: np.ndarray, p_ts: np.ndarray) -> np.ndarray:
    """Mean of the two heads' probability maps (not of their logits)."""
    return (p_tt + p_ts) * 0.5


def ensemble_predict(model: DS2Net, x) -> np.ndarray:
    """Per-pixel argmax of the averaged P_tt and P_ts maps; N x H x W in {0, 1}."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    return predict_proba(model, x, "ensemble").argmax(axis=1).astype(np.uint8)


def predict(model: DS2Net, x, path: str = "ensemble") -> np.ndarray:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    return predict_proba(model, x, path).argmax(axis=1).astype(np.uint8)


def evaluate_arrays(model: DS2Net, data: SplitArrays, path: str = "ensemble", chunk: int = 16) -> Confusion:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    c = Confusion()
    for i in range(0, len(data), chunk):
        pred = predict(model, data.images[i:i + chunk], path)
        c = accumulate(c, pred, data.masks[i:i + chunk])
    return c


def sample_batch(data: SplitArrays, seed: int, iteration: int, stream: int, batch: int, use_aug: bool):
    """Batch drawn from a generator keyed on (seed, iteration, stream).

    Keying on the iteration makes the data order independent of how the run
    was split across resumptions.
    """
    rng = np.random.default_rng([seed, iteration, stream])
    idx = rng.integers(0, len(data), size=batch)
    aug_seeds = rng.integers(0, 2**62, size=batch)
    images, masks = [], []
    for i, s in zip(idx, aug_seeds):
        img, msk = data.images[i], data.masks[i]
        if use_aug:
            p = augment(SamplePair(img, msk, "?"), int(s))
            img, msk = p.image, p.mask
        images.append(img)
        masks.append(msk)
    return np.stack(images).astype(np.float32), np.stack(masks)


@dataclass
class TrainState:
    cfg: RunConfig
    model: DS2Net
    optimizers: dict[str, SGD | Adam]
    iteration: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        model = DS2Net(cfg)
        groups = model.group_params()
        opts: dict[str, SGD | Adam] = {
            "encoder": SGD(groups["encoder"], cfg.lr_encoder, cfg.momentum, cfg.weight_decay),
            "head": SGD(groups["head"], cfg.lr_head, cfg.momentum, cfg.weight_decay),
        }
        if cfg.feature_align:
            opts["disc"] = Adam(groups["disc"], cfg.lr_disc, (cfg.disc_beta1, cfg.disc_beta2))
        return cls(cfg, model, opts)

    def base_lrs(self) -> dict[str, float]:
        return {"encoder": self.cfg.lr_encoder, "head": self.cfg.lr_head, "disc": self.cfg.lr_disc}

    def set_lrs(self, t: int) -> dict[str, float]:
        lrs = {}
        for key, base in self.base_lrs().items():
            lrs[key] = poly_lr(base, t, self.cfg.iterations, self.cfg.poly_power)
            if key in self.optimizers:
                self.optimizers[key].lr = lrs[key]
        return lrs

    # -- checkpointing -------------------------------------------------------
    def save(self, path) -> None:
        tensors = {f"param/{n}": p.data for n, p in self.model.named_parameters()}
        for key, opt in self.optimizers.items():
            for n, arr in opt.state().items():
                tensors[f"opt/{key}/{n}"] = arr
        meta = {"iteration": self.iteration, "config": self.cfg.to_dict()}
        save_checkpoint(path, tensors, config_digest(self.cfg.to_json()), meta)

    @classmethod
    def load(cls, path, cfg: RunConfig | None = None) -> "TrainState":
        tensors, digest, meta = load_checkpoint(path)
        saved = RunConfig.from_dict(meta["config"])
        if cfg is not None and config_digest(cfg.to_json()) != digest:
            raise ConfigError(f"checkpoint {path} was written by a different configuration")
        state = cls.create(cfg or saved)
        for n, p in state.model.named_parameters():
            key = f"param/{n}"
            if key not in tensors:
                raise ConfigError(f"checkpoint {path} lacks parameter {n}")
            p.data = tensors[key].copy()
        for key, opt in state.optimizers.items():
            prefix = f"opt/{key}/"
            opt.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        state.iteration = int(meta["iteration"])
        return state

    def param_digest(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.group_params()[group].items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _locate_nan(state: TrainState, xs, ys, xt) -> str:
    with dc.detect_anomaly():
        try:
            _generator_forward(state, Tensor(xs), ys, Tensor(xt))
        except NumericError as exc:
            return exc.op
    return "unknown"


def _generator_forward(state: TrainState, xs: Tensor, ys, xt: Tensor):
    cfg, m = state.cfg, state.model
    feats = {}
    zero = 0.0
    if not cfg.symmetric:
        in_s, _ = m.head_inputs(m.E_s(xs), None)
        seg_ss = seg_ce(m.H_s(in_s), ys)
        return total_loss(seg_ss, zero, zero, zero, cfg.lambda_Es, cfg.lambda_Et), feats
    f_ss = m.E_s(xs)
    f_st = m.E_t(xs)
    in_ss, in_st = m.head_inputs(f_ss, f_st)
    seg_ss = seg_ce(m.H_s(in_ss), ys)
    seg_st = seg_ce(m.H_t(in_st), ys)
    adv_s = adv_t = zero
    if cfg.feature_align:
        f_ts = m.E_s(xt)
        if cfg.adv_two_sided:
            f_tt = m.E_t(xt)
            adv_s = gen_adv_loss(m.D_s, f_ts, f_ss)
            adv_t = gen_adv_loss(m.D_t, f_st, f_tt)
        else:
            with dc.no_grad():
                f_tt = m.E_t(xt)
            adv_s = gen_adv_loss(m.D_s, f_ts)
            adv_t = gen_adv_loss(m.D_t, f_st)
        feats = {"ss": f_ss.detach(), "ts": f_ts.detach(), "tt": f_tt.detach(), "st": f_st.detach()}
    return total_loss(seg_ss, seg_st, adv_s, adv_t, cfg.lambda_Es, cfg.lambda_Et), feats


def train_step(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray) -> LossReport:
    """One generator update followed by one critic update on detached features."""
    cfg, m = state.cfg, state.model
    for opt in state.optimizers.values():
        opt.zero_grad()
    report, feats = _generator_forward(state, Tensor(xs), ys, Tensor(xt))
    if not report.is_finite():
        op = _locate_nan(state, xs, ys, xt)
        raise NumericError(op, f"non-finite loss at iteration {state.iteration}; first bad op: {op}")
    if report.objective is not None:
        report.objective.backward()
    report.objective = None
    state.optimizers["encoder"].step()
    state.optimizers["head"].step()

    if cfg.feature_align:
        d_s = disc_loss(m.D_s, feats["ss"], feats["ts"])
        d_t = disc_loss(m.D_t, feats["tt"], feats["st"])
        if not (math.isfinite(d_s.item()) and math.isfinite(d_t.item())):
            raise NumericError("disc_loss", f"non-finite critic loss at iteration {state.iteration}")
        (d_s + d_t).backward()
        state.optimizers["disc"].step()
        report.adv_Es_disc = d_s.item()
        report.adv_Et_disc = d_t.item()
    state.iteration += 1
    return report


# -- runs --------------------------------------------------------------------------

LOSS_HEADER = ["iteration"] + LossReport.columns() + ["lr_encoder", "lr_head", "lr_disc"]


@dataclass
class RunData:
    source_train: SplitArrays
    target_train: SplitArrays
    tests: dict[str, SplitArrays] = field(default_factory=dict)

    @classmethod
    def load(cls, root, cfg: RunConfig) -> "RunData":
        src = load_split(root, cfg.source_domain, "train")
        tgt = load_split(root, cfg.target_domain, "train")
        tests = {
            f"{cfg.source_domain}/test": load_split(root, cfg.source_domain, "test"),
            f"{cfg.target_domain}/test": load_split(root, cfg.target_domain, "test"),
        }
        data = cls(src, tgt, tests)
        data.check(cfg)
        return data

    def check(self, cfg: RunConfig) -> None:
        shape = self.source_train.images.shape[-2:]
        if shape != (cfg.image_size, cfg.image_size):
            raise ConfigError(f"data images are {shape}, config expects {cfg.image_size}")


def evaluate(state: TrainState, data: SplitArrays, split: str) -> MetricsRow:
    """Metrics over a whole split; ensemble path for the dual model."""
    path = "ensemble" if state.cfg.symmetric else "s"
    c = evaluate_arrays(state.model, data, path)
    return metrics_row(c, state.cfg.run_id, state.cfg.config_hash, state.iteration, split)


def _rewrite_csv(path: Path, header: Sequence[str], keep_until: int) -> None:
    """Drop rows beyond ``keep_until`` (left by an interrupted continuation)."""
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    it_col = list(header).index("iteration")
    kept = [rows[0]] + [r for r in rows[1:] if int(r[it_col]) <= keep_until]
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)


def _append_csv(path: Path, header: Sequence[str], rows: list[list]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerows(rows)


@dataclass
class RunResult:
    cfg: RunConfig
    final: dict[str, MetricsRow]
    out_dir: Path
    state: TrainState


def train(
    cfg: RunConfig,
    data: RunData | str | Path,
    out_dir,
    *,
    resume: bool = False,
    stop_at: int | None = None,
) -> RunResult:
    """Train ``cfg`` writing config, checkpoints, loss and metric CSVs to ``out_dir``.

    ``stop_at`` ends the invocation early (after that many completed
    iterations), leaving a checkpoint that ``resume`` continues from.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(data, RunData):
        data = RunData.load(data, cfg)
    data.check(cfg)
    ckpt = out / "checkpoint.bin"
    loss_csv = out / "loss.csv"
    metrics_csv = out / "metrics.csv"

    if resume and ckpt.exists():
        state = TrainState.load(ckpt, cfg)
        _rewrite_csv(loss_csv, LOSS_HEADER, state.iteration)
        _rewrite_csv(metrics_csv, MetricsRow.HEADER, state.iteration)
        log.info("resumed %s at iteration %d", cfg.run_id, state.iteration)
    else:
        state = TrainState.create(cfg)
        for p in (loss_csv, metrics_csv, ckpt):
            if p.exists():
                p.unlink()
    (out / "config.json").write_text(cfg.to_json() + "\n")

    total = cfg.iterations
    end = total if stop_at is None else min(stop_at, total)
    pending_loss: list[list] = []
    final: dict[str, MetricsRow] = {}
    while state.iteration < end:
        t = state.iteration
        lrs = state.set_lrs(t)
        xs, ys = sample_batch(data.source_train, cfg.seed, t, 0, cfg.batch_size, cfg.augment)
        if cfg.feature_align:
            xt, _ = sample_batch(data.target_train, cfg.seed, t, 1, cfg.batch_size, cfg.augment)
        else:
            xt = xs
        report = train_step(state, xs, ys, xt)
        it = state.iteration
        if it % cfg.log_interval == 0 or it == total:
            pending_loss.append([it] + [repr(v) for v in report.row()] + [repr(lrs[k]) for k in ("encoder", "head", "disc")])
        if it % cfg.eval_interval == 0 or it == total:
            rows = [evaluate(state, arr, split) for split, arr in data.tests.items()]
            _append_csv(loss_csv, LOSS_HEADER, pending_loss)
            pending_loss = []
            _append_csv(metrics_csv, MetricsRow.HEADER, [r.csv_fields() for r in rows])
            final = {r.split: r for r in rows}
            log.info(
                "%s it %d seg %.4f/%.4f %s",
                cfg.run_id,
                it,
                report.seg_ss,
                report.seg_st,
                " ".join(f"{r.split}:IoU={r.iou_lesion:.4f}" for r in rows),
            )
        if it % cfg.checkpoint_interval == 0 or it == total or it == end:
            _append_csv(loss_csv, LOSS_HEADER, pending_loss)
            pending_loss = []
            state.save(ckpt)
    if not final and state.iteration >= total:
        rows = [evaluate(state, arr, split) for split, arr in data.tests.items()]
        final = {r.split: r for r in rows}
    return RunResult(cfg, final, out, state)


# -- ablation ----------------------------------------------------------------------

def default_ladder(base: RunConfig | None = None) -> list[RunConfig]:
    """The five rows: plain segmentor, +symmetric, +FA, +DDSM, +DUSM."""
    base = base or RunConfig()
    flags = [
        ("w/o-DA", dict(symmetric=False, feature_align=False, ddsm=False, dusm=False)),
        ("+Symmetric", dict(symmetric=True, feature_align=False, ddsm=False, dusm=False)),
        ("+FA", dict(symmetric=True, feature_align=True, ddsm=False, dusm=False)),
        ("+DDSM", dict(symmetric=True, feature_align=True, ddsm=True, dusm=False)),
        ("+DUSM", dict(symmetric=True, feature_align=True, ddsm=True, dusm=True)),
    ]
    return [base.replace(name=name, **f) for name, f in flags]


def load_ladder(path) -> list[RunConfig]:
    """Ladder file: JSON ``{"base": {...}, "rows": [{...}, ...]}`` or a list of row dicts."""
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(spec, list):
        base, rows = {}, spec
    elif isinstance(spec, dict):
        unknown = set(spec) - {"base", "rows"}
        if unknown:
            raise ConfigError(f"{path}: unknown ladder key(s) {sorted(unknown)}")
        base, rows = spec.get("base", {}), spec.get("rows")
        if rows is None:
            return default_ladder(RunConfig.from_dict(base))
    else:
        raise ConfigError(f"{path}: ladder must be a JSON object or list")
    if not rows:
        raise ConfigError(f"{path}: ladder has no rows")
    return [RunConfig.from_dict({**base, **row}) for row in rows]


ABLATION_HEADER = ["row", "name", "seed", "status", "IoU_lesion", "IoU_background", "mIoU"]


@dataclass
class AblationRow:
    name: str
    per_seed: dict[int, MetricsRow | None]

    @property
    def ok(self) -> list[MetricsRow]:
        return [r for r in self.per_seed.values() if r is not None]

    def mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.ok]
        return float(np.mean(vals)) if vals else float("nan")


def run_ablation(
    ladder: list[RunConfig],
    data_dir,
    seeds: Sequence[int],
    out_dir,
    *,
    force: bool = False,
) -> list[AblationRow]:
    """Train every (row, seed) pair and tabulate target-domain test metrics.

    A run that raises is recorded as failed; the others still run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict[tuple[str, str], RunData] = {}
    rows: list[AblationRow] = []
    csv_rows: list[list] = []
    for i, base in enumerate(ladder):
        per_seed: dict[int, MetricsRow | None] = {}
        for seed in seeds:
            cfg = base.replace(seed=int(seed))
            run_dir = out / f"row{i}" / f"seed{seed}"
            split = f"{cfg.target_domain}/test"
            try:
                key = (cfg.source_domain, cfg.target_domain)
                if key not in cache:
                    cache[key] = RunData.load(data_dir, cfg)
                cache[key].check(cfg)
                res = train(cfg, cache[key], run_dir)
                per_seed[seed] = res.final[split]
                m = res.final[split]
                csv_rows.append([i, cfg.name, seed, "ok", repr(m.iou_lesion), repr(m.iou_background), repr(m.miou)])
            except (ValueError, FloatingPointError, OSError, KeyError) as exc:
                log.error("run %s seed %d failed: %s", cfg.name, seed, exc)
                per_seed[seed] = None
                csv_rows.append([i, cfg.name, seed, "failed", "", "", ""])
        rows.append(AblationRow(base.name, per_seed))
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(csv_rows)
        for i, r in enumerate(rows):
            w.writerow([i, r.name, "mean", "ok" if r.ok else "failed", repr(r.mean("iou_lesion")),
                        repr(r.mean("iou_background")), repr(r.mean("miou"))])
    (out / "ablation.md").write_text(format_table(rows, seeds))
    return rows


def format_table(rows: list[AblationRow], seeds: Sequence[int]) -> str:
    head = ["Method"] + [f"IoU s{s}" for s in seeds] + ["IoU mean", "mIoU mean"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r.name]
        for s in seeds:
            m = r.per_seed.get(s)
            cells.append("failed" if m is None else f"{100 * m.iou_lesion:.2f}")
        cells.append(f"{100 * r.mean('iou_lesion'):.2f}" if r.ok else "failed")
        cells.append(f"{100 * r.mean('miou'):.2f}" if r.ok else "failed")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def check_ladder(rows: list[AblationRow], seeds: Sequence[int]) -> tuple[dict[str, bool], str]:
    """Directional checks on a default ladder's mean target lesion IoU."""
    mean = {r.name: r.mean("iou_lesion") for r in rows}
    per = {r.name: [r.per_seed[s].iou_lesion if r.per_seed.get(s) else float("nan") for s in seeds] for r in rows}
    base, sym, fa, dd, full = (mean[k] for k in ("w/o-DA", "+Symmetric", "+FA", "+DDSM", "+DUSM"))
    monotone = sum(a <= b <= c for a, b, c in zip(per["+FA"], per["+DDSM"], per["+DUSM"]))
    checks = {
        "sym within 2 of base": abs(sym - base) <= 0.02,
        "fa >= base + 3": fa - base >= 0.03,
        "ddsm >= fa": dd >= fa,
        "full >= ddsm": full >= dd,
        "full >= base + 5": full - base >= 0.05,
        "monotone in 2/3 seeds": 3 * monotone >= 2 * len(seeds),
    }
    summary = " ".join(f"{k}={100 * v:.2f}" for k, v in mean.items()) + f"; monotone seeds {monotone}/{len(seeds)}"
    return checks, summary
