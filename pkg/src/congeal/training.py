"""Two-phase optimization: autoencoder pretraining, then joint alignment.

The joint phase drives a recurrent localizer: at every recurrence the
original latent map is re-warped by the composition of all steps so far
(one interpolation per recurrence, never chained resampling), the localizer
predicts a correction, and the correction is exponentiated and appended.
The alignment loss compares every ordered image pair after fusing the
source's forward transform with the target's inverse into a single matrix,
so each pair term costs exactly one interpolation.

Inverses are built alongside the forward cascade by exponentiating negated
coefficients; no matrix is numerically inverted during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff, lie, warp
from .autodiff import Tensor
from .lie import GroupFamily
from .nets import Decoder, Encoder, LocNet, init_models
from .warp import FlipConfig, warp_op

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EpochLog",
    "CascadeOut",
    "TrainingDivergedError",
    "Adam",
    "lr_schedule",
    "curriculum_family",
    "ic_stn_forward",
    "ic_loss",
    "ic_loss_flips",
    "pretrain_ae",
    "train",
    "align_collection",
    "load_config",
    "save_config",
    "write_loss_curve",
]

DEFAULT_CURRICULUM = ((0, GroupFamily.SE2), (130, GroupFamily.AFF2), (260, GroupFamily.SL3))


class TrainingDivergedError(RuntimeError):
    def __init__(self, phase: str, epoch: int, lr: float, detail: str):
        super().__init__(f"{phase} phase diverged at epoch {epoch} (lr={lr:g}): {detail}")
        self.phase = phase
        self.epoch = epoch
        self.lr = lr


@dataclass
class TrainConfig:
    ae_epochs: int = 300
    joint_epochs: int = 400
    recurrences: int = 5
    batch_size: int | None = None  # None: full collection when N <= 32, else 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.9
    lr_step: int = 50
    curriculum: tuple = DEFAULT_CURRICULUM
    flips_enabled: bool = False
    seed: int = 0
    use_curriculum: bool = True
    freeze_ae: bool = False
    direct_matrix: bool = False  # ablation: predict matrix entries, skip the exponential

    def validate(self) -> None:
        if self.recurrences < 1:
            raise ValueError("recurrences must be >= 1")
        if self.ae_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if self.use_curriculum and not self.direct_matrix:
            if not self.curriculum:
                raise ValueError("curriculum schedule is empty")
            starts = [s for s, _ in self.curriculum]
            fams = [f for _, f in self.curriculum]
            if starts[0] != 0:
                raise ValueError("curriculum must start at epoch 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError("curriculum start epochs must be strictly increasing")
            if any(g.level <= f.level for f, g in zip(fams, fams[1:])):
                raise ValueError("curriculum families must be strictly nested")
            if fams[-1] is not GroupFamily.SL3:
                raise ValueError("curriculum must end at the full family (sl3)")


@dataclass
class EpochLog:
    phase: str
    epoch: int
    lr: float
    loss: float
    family: str
    flip_switches: int
    loss_noflip: float | None = None


@dataclass
class CascadeOut:
    """Per-recurrence coefficients plus the running forward/inverse products."""

    composed: Tensor  # (B, 3, 3) float64
    composed_inv: Tensor  # (B, 3, 3) float64
    thetas: list  # recurrence-ordered list of (B, 8) float32 snapshots


@dataclass
class TrainResult:
    encoder: Encoder
    decoder: Decoder
    locnet: LocNet
    ae_logs: list
    joint_logs: list
    epoch_transforms: list  # (epoch, GroupFamily, (N, 3, 3) float64) per joint epoch
    final_mats: np.ndarray  # (N, 3, 3)
    final_thetas: np.ndarray  # (N, R, 8)
    flip_configs: list
    per_image_loss: np.ndarray  # (N,)
    final_loss: float
    baseline_loss: float  # all-identity pair loss on the same collection


class Adam:
    """Standard Adam over a named parameter dict (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError("optimizer", self.t, lr, f"non-finite gradient in {name!r}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.learning_rate * config.lr_decay ** (epoch // config.lr_step)


def curriculum_family(epoch: int, config: TrainConfig) -> GroupFamily:
    if not config.use_curriculum:
        return GroupFamily.SL3
    fam = config.curriculum[0][1]
    for start, f in config.curriculum:
        if epoch >= start:
            fam = f
    return fam


_DIRECT_BASIS = np.zeros((8, 9), dtype=np.float64)
for _k in range(8):
    _DIRECT_BASIS[_k, _k] = 1.0


def _direct_transform(theta: Tensor) -> tuple[Tensor, Tensor]:
    """Ablation parameterization: transform = identity + raw matrix entries
    (the ninth entry pinned to 0).  The inverse falls back to a numeric solve
    since there is no algebra to negate."""
    b = theta.data.shape[0]
    delta = autodiff.reshape(autodiff.matmul(autodiff.astype(theta, np.float64), autodiff.tensor(_DIRECT_BASIS)), (b, 3, 3))
    mat = autodiff.add(delta, autodiff.tensor(np.eye(3)))
    inv_data = np.linalg.inv(mat.data)

    def backward(g):
        it = np.swapaxes(inv_data, -1, -2)
        mat._accumulate(-(it @ g @ it))

    inv = autodiff._make(inv_data, (mat,), backward)
    return mat, inv


def ic_stn_forward(
    u: Tensor,
    locnet: LocNet,
    family: GroupFamily,
    recurrences: int,
    direct_matrix: bool = False,
) -> CascadeOut:
    """Run the recurrent localizer on latent maps u (B, 3, H, W).

    Step r sees the original u warped once by the composition of steps
    1..r-1; its masked prediction is exponentiated and appended on the right,
    so the returned product applies step 1 first.
    """
    b = u.data.shape[0]
    eye = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
    composed = autodiff.tensor(eye)
    composed_inv = autodiff.tensor(eye.copy())
    mask = autodiff.tensor(lie.curriculum_mask(family).astype(np.float32))
    thetas = []
    for r in range(recurrences):
        x = u if r == 0 else warp_op(u, composed)
        raw = locnet(x)
        if not np.all(np.isfinite(raw.data)):
            raise TrainingDivergedError("forward", r, float("nan"), "localizer produced non-finite coefficients")
        if direct_matrix:
            step, step_inv = _direct_transform(raw)
            thetas.append(raw.data.astype(np.float32).copy())
        else:
            theta = autodiff.mul(raw, mask)
            step = lie.group_exp(theta, family)
            step_inv = lie.group_exp(autodiff.neg(theta), family)
            thetas.append(theta.data.astype(np.float32).copy())
        composed = autodiff.matmul(composed, step)
        composed_inv = autodiff.matmul(step_inv, composed_inv)
    return CascadeOut(composed, composed_inv, thetas)


def _ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    idx_i, idx_j = np.nonzero(~np.eye(n, dtype=bool))
    return idx_i, idx_j


def ic_loss(v: Tensor, cascade: CascadeOut):
    """Sum over ordered pairs (i, j) of the squared difference between map j
    and map i warped by (forward_i . inverse_j), fused into one matrix and
    one interpolation per pair.

    Returns (scalar loss tensor, (N, N) per-pair values with nan diagonal).
    """
    n = v.data.shape[0]
    if n < 2:
        raise ValueError("pair loss needs at least 2 images in the batch")
    idx_i, idx_j = _ordered_pairs(n)
    m_pair = autodiff.matmul(autodiff.gather(cascade.composed, idx_i), autodiff.gather(cascade.composed_inv, idx_j))
    warped = warp_op(autodiff.gather(v, idx_i), m_pair)
    diff = autodiff.sub(autodiff.gather(v, idx_j), warped)
    per_pair = autodiff.sum_squares(diff, axis=(1, 2, 3))
    loss = autodiff.sum_(per_pair)
    pair_vals = np.full((n, n), np.nan)
    pair_vals[idx_i, idx_j] = per_pair.data
    return loss, pair_vals


_FLIP_MAT = np.diag([-1.0, 1.0, 1.0])


def _pair_config_matrices(casc_id: CascadeOut, casc_fl: CascadeOut, idx_i, idx_j, cfg: int, grad: bool):
    """Fused pair matrix for one flip configuration.

    cfg indexes (k_i, k_j) as (0,0), (0,1), (1,0), (1,1); a flipped source
    contributes its flip as diag(-1,1,1) inside the chain so the pair still
    costs one interpolation.
    """
    k_i, k_j = cfg // 2, cfg % 2
    fwd = casc_fl.composed if k_i else casc_id.composed
    inv = casc_fl.composed_inv if k_j else casc_id.composed_inv
    if grad:
        m = autodiff.gather(fwd, idx_i)
        if k_i:
            m = autodiff.matmul(m, autodiff.tensor(_FLIP_MAT))
        return autodiff.matmul(m, autodiff.gather(inv, idx_j))
    m = fwd.data[idx_i]
    if k_i:
        m = m @ _FLIP_MAT
    return m @ inv.data[idx_j]


def ic_loss_flips(v: Tensor, casc_id: CascadeOut, casc_fl: CascadeOut):
    """Pair loss minimized over per-pair flip configurations.

    For every ordered pair all four (source, target) flip combinations are
    scored without building a graph; the loss then rebuilds only the winning
    term of each pair differentiably, so gradients flow solely through the
    selected configurations.  Because (identity, identity) is among the
    candidates, this loss never exceeds the flip-free pair loss at the same
    weights.

    Per-image flip labels are decoded from the winners by relative chirality:
    the first image in the batch anchors the identity config, and each other
    image takes the XOR of the winner configs along its pair with the anchor
    (the better-scoring direction decides on disagreement).

    Returns (loss tensor, per-image FlipConfig list, info dict).
    """
    n = v.data.shape[0]
    if n < 2:
        raise ValueError("pair loss needs at least 2 images in the batch")
    idx_i, idx_j = _ordered_pairs(n)
    v_data = v.data
    v_flip = np.ascontiguousarray(v_data[..., ::-1])
    targets = {0: v_data[idx_j], 1: v_flip[idx_j]}
    src = v_data[idx_i]

    raw = np.empty((len(idx_i), 4))
    for cfg in range(4):
        m = _pair_config_matrices(casc_id, casc_fl, idx_i, idx_j, cfg, grad=False)
        coords, _ = warp._make_grid_kernel(m, v_data.shape[2], v_data.shape[3])
        out, _ = warp._sample_kernel(src, coords)
        d = targets[cfg % 2] - out
        raw[:, cfg] = (d.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
    winners = np.argmin(raw, axis=1)  # ties resolve to the lowest config index

    loss = None
    for cfg in range(4):
        sel = np.nonzero(winners == cfg)[0]
        if sel.size == 0:
            continue
        m = _pair_config_matrices(casc_id, casc_fl, idx_i[sel], idx_j[sel], cfg, grad=True)
        warped = warp_op(autodiff.gather(v, idx_i[sel]), m)
        tgt = autodiff.tensor(targets[cfg % 2][sel])
        term = autodiff.sum_squares(autodiff.sub(tgt, warped))
        loss = term if loss is None else autodiff.add(loss, term)

    configs = _assign_flips(n, idx_i, idx_j, winners, raw)
    min_vals = raw[np.arange(len(winners)), winners]
    pair_vals = np.full((n, n), np.nan)
    pair_vals[idx_i, idx_j] = min_vals
    info = {
        "pair_vals": pair_vals,
        "winners": winners,
        "loss_noflip": float(raw[:, 0].sum()),
        "loss_flips": float(min_vals.sum()),
    }
    return loss, configs, info


def _assign_flips(n: int, idx_i, idx_j, winners, raw) -> list:
    """Anchor-relative decoding of per-image flips from pair winners."""
    pos = {(int(a), int(b)): p for p, (a, b) in enumerate(zip(idx_i, idx_j))}
    labels = [0] * n
    for j in range(1, n):
        p_fwd, p_bwd = pos[(0, j)], pos[(j, 0)]
        r_fwd = (winners[p_fwd] // 2) ^ (winners[p_fwd] % 2)
        r_bwd = (winners[p_bwd] // 2) ^ (winners[p_bwd] % 2)
        if r_fwd == r_bwd:
            labels[j] = int(r_fwd)
        else:
            best_fwd = raw[p_fwd, winners[p_fwd]]
            best_bwd = raw[p_bwd, winners[p_bwd]]
            labels[j] = int(r_fwd if best_fwd <= best_bwd else r_bwd)
    return [FlipConfig.HORIZONTAL if l else FlipConfig.IDENTITY for l in labels]


def _batches(n: int, batch_size: int | None, rng: np.random.Generator) -> list:
    bs = batch_size if batch_size is not None else (n if n <= 32 else 16)
    if bs >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    chunks = [perm[i : i + bs] for i in range(0, n, bs)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _check_finite_loss(loss: Tensor, phase: str, epoch: int, lr: float) -> float:
    val = float(loss.data)
    if not np.isfinite(val):
        raise TrainingDivergedError(phase, epoch, lr, f"loss is {val}")
    return val


def pretrain_ae(v: np.ndarray, encoder: Encoder, decoder: Decoder, config: TrainConfig, rng=None) -> list:
    """Reconstruction pretraining: minimize the squared error between each
    masked feature map and decode(encode(map))."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    n = v.shape[0]
    opt = Adam({**encoder.params(), **decoder.params()})
    logs = []
    for epoch in range(config.ae_epochs):
        lr = lr_schedule(epoch, config)
        total = 0.0
        for batch in _batches(n, config.batch_size, rng):
            vb = autodiff.tensor(v[batch])
            recon = decoder(encoder(vb))
            loss = autodiff.sum_squares(autodiff.sub(vb, recon))
            total += _check_finite_loss(loss, "ae", epoch, lr)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
        logs.append(EpochLog("ae", epoch, lr, total, "", 0))
    return logs


def align_collection(v: np.ndarray, encoder: Encoder, locnet: LocNet, config: TrainConfig, family: GroupFamily | None = None):
    """Inference pass over a whole collection with fixed weights.

    Returns (mats (N,3,3), thetas (N,R,8), flip configs, per-image loss (N,),
    total loss).  Per-image loss sums the winning pair terms that use the
    image as warp source.
    """
    if family is None:
        family = curriculum_family(max(config.joint_epochs - 1, 0), config)
    n = v.shape[0]
    vt = autodiff.tensor(v)
    u = encoder(vt)
    casc = ic_stn_forward(u, locnet, family, config.recurrences, config.direct_matrix)
    if config.flips_enabled:
        casc_f = ic_stn_forward(autodiff.flip_w(u), locnet, family, config.recurrences, config.direct_matrix)
        _, configs, info = ic_loss_flips(vt, casc, casc_f)
        pair_vals = info["pair_vals"]
        total = info["loss_flips"]
        flip_sel = np.array([c is FlipConfig.HORIZONTAL for c in configs])
        mats = np.where(flip_sel[:, None, None], casc_f.composed.data, casc.composed.data)
        theta_src = [np.where(flip_sel[:, None], tf, t) for t, tf in zip(casc.thetas, casc_f.thetas)]
    else:
        loss, pair_vals = ic_loss(vt, casc)
        total = float(loss.data)
        configs = [FlipConfig.IDENTITY] * n
        mats = casc.composed.data.copy()
        theta_src = casc.thetas
    per_image = np.nansum(pair_vals, axis=1)
    thetas = np.stack(theta_src, axis=1)
    return mats, thetas, configs, per_image, total


def train(v: np.ndarray, config: TrainConfig) -> TrainResult:
    """Full pipeline on a preprocessed collection v (N, K, H, W) float32."""
    config.validate()
    n = v.shape[0]
    encoder, decoder, locnet = init_models(v.shape[1], config.seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 1))))

    ae_logs = pretrain_ae(v, encoder, decoder, config, rng)

    params = dict(locnet.params())
    if not config.freeze_ae:
        params.update(encoder.params())
    opt = Adam(params)

    idx_i, idx_j = _ordered_pairs(n)
    baseline = float(((v[idx_j].astype(np.float64) - v[idx_i]) ** 2).sum())

    joint_logs: list[EpochLog] = []
    epoch_transforms = []
    prev_configs = [FlipConfig.IDENTITY] * n
    for epoch in range(config.joint_epochs):
        fam = curriculum_family(epoch, config)
        lr = lr_schedule(epoch, config)
        total = 0.0
        noflip_total = 0.0
        mats_epoch = np.zeros((n, 3, 3))
        epoch_configs = list(prev_configs)
        for batch in _batches(n, config.batch_size, rng):
            vb = autodiff.tensor(v[batch])
            u = encoder(vb)
            casc = ic_stn_forward(u, locnet, fam, config.recurrences, config.direct_matrix)
            if config.flips_enabled:
                casc_f = ic_stn_forward(autodiff.flip_w(u), locnet, fam, config.recurrences, config.direct_matrix)
                loss, configs, info = ic_loss_flips(vb, casc, casc_f)
                noflip_total += info["loss_noflip"]
                for local, img in enumerate(batch):
                    epoch_configs[img] = configs[local]
            else:
                loss, _ = ic_loss(vb, casc)
            total += _check_finite_loss(loss, "joint", epoch, lr)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            mats_epoch[batch] = casc.composed.data
        switches = sum(a is not b for a, b in zip(prev_configs, epoch_configs))
        prev_configs = epoch_configs
        joint_logs.append(
            EpochLog("joint", epoch, lr, total, fam.value, switches, noflip_total if config.flips_enabled else None)
        )
        epoch_transforms.append((epoch, fam, mats_epoch))

    mats, thetas, flip_configs, per_image, final_loss = align_collection(v, encoder, locnet, config)
    return TrainResult(
        encoder=encoder,
        decoder=decoder,
        locnet=locnet,
        ae_logs=ae_logs,
        joint_logs=joint_logs,
        epoch_transforms=epoch_transforms,
        final_mats=mats,
        final_thetas=thetas,
        flip_configs=flip_configs,
        per_image_loss=per_image,
        final_loss=final_loss,
        baseline_loss=baseline,
    )


_CONFIG_KEYS = {
    "ae_epochs": int,
    "joint_epochs": int,
    "recurrences": int,
    "batch_size": "maybe_int",
    "learning_rate": float,
    "lr_decay": float,
    "lr_step": int,
    "curriculum": "curriculum",
    "flips_enabled": "bool",
    "seed": int,
    "use_curriculum": "bool",
    "freeze_ae": "bool",
    "direct_matrix": "bool",
}


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_curriculum(s: str):
    out = []
    for part in s.split(","):
        start, fam = part.split(":")
        out.append((int(start), GroupFamily(fam.strip())))
    return tuple(out)


def load_config(path) -> TrainConfig:
    """Read a flat key=value config file; '#' starts a comment line."""
    cfg = TrainConfig()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = _CONFIG_KEYS[key]
        if kind == "bool":
            parsed = _parse_bool(value)
        elif kind == "curriculum":
            parsed = _parse_curriculum(value)
        elif kind == "maybe_int":
            parsed = None if value in ("", "auto") else int(value)
        else:
            parsed = kind(value)
        setattr(cfg, key, parsed)
    cfg.validate()
    return cfg


def save_config(path, config: TrainConfig) -> None:
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(config, key)
        if key == "curriculum":
            value = ",".join(f"{s}:{f.value}" for s, f in value)
        elif key == "batch_size":
            value = "auto" if value is None else value
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_loss_curve(path, logs: list) -> None:
    """Joint-phase loss curve as CSV: epoch, lr, loss, family, flip_switches."""
    rows = ["epoch,lr,loss,family,flip_switches"]
    for log in logs:
        if log.phase != "joint":
            continue
        rows.append(f"{log.epoch},{log.lr!r},{log.loss!r},{log.family},{log.flip_switches}")
    Path(path).write_text("\n".join(rows) + "\n")
