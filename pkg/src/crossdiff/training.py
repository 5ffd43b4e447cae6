"""Training protocol: the weighted two-term objective (noise-prediction
MSE plus mask-decoder MSE), AdamW with decoupled weight decay, gradient
clipping, and a fully deterministic step loop.

Every random draw at step ``s`` comes from a generator seeded by
``(seed, stream, s)``, and minibatch order for epoch ``e`` from
``(seed, stream, e)``, so resuming from a checkpoint replays the exact
trajectory of an uninterrupted run.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import NumericError
from .model import CrossDiffModel, ModelConfig, build_model, preset_config
from .nn import Parameter
from .schedule import forward_noise

_STEP_STREAM = 0xA11CE
_EPOCH_STREAM = 0xB0B
_INIT_STREAM = 0x5EED


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-4
    batch_size: int = 12
    total_steps: int = 1000
    seed: int = 0
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    preset: str = "desk"
    log_every: int = 1
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("loss weights must satisfy alpha >= 0, beta >= 0, alpha+beta > 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class LossBreakdown:
    diffusion_term: float
    decoder_term: float
    total: float


class AdamW:
    """AdamW with decoupled weight decay. Parameters whose grad is None
    are skipped entirely (no decay either); parameters flagged
    ``decay=False`` never receive weight decay."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and getattr(p, "decay", True):
                p.data -= (self.lr * self.weight_decay) * p.data
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * upd.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k, v in arrays.items():
            if k.startswith("opt.m."):
                self.m[k[len("opt.m."):]] = v.copy()
            elif k.startswith("opt.v."):
                self.v[k[len("opt.v."):]] = v.copy()


def clip_global_norm(params, max_norm: float) -> float:
    sq = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def combined_loss(eps: np.ndarray, eps_hat: ag.Tensor, x_d: ag.Tensor,
                  gt_full: np.ndarray, x0_diff: np.ndarray | None,
                  alpha: float, beta: float) -> tuple[ag.Tensor, LossBreakdown]:
    """Weighted objective. Branches with zero weight still report their
    value in the breakdown but are left out of the differentiated total,
    so their parameters see no gradient (and no update)."""
    eps = np.asarray(eps)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"eps {eps.shape} vs eps_hat {eps_hat.shape} shape mismatch")
    if x0_diff is not None and np.asarray(x0_diff).shape != eps.shape:
        raise ValueError("x0 and eps shapes must match")
    gt = np.asarray(gt_full)
    if gt.shape != x_d.shape:
        raise ValueError(f"gt {gt.shape} vs decoded {x_d.shape} shape mismatch")

    de = eps_hat - ag.Tensor(eps.astype(eps_hat.dtype, copy=False))
    diffusion = (de * de).mean()
    dd = x_d - ag.Tensor(gt.astype(x_d.dtype, copy=False))
    decoder = (dd * dd).mean()

    terms = []
    if alpha > 0:
        terms.append(diffusion * alpha)
    if beta > 0:
        terms.append(decoder * beta)
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    bd = LossBreakdown(
        diffusion_term=float(diffusion.data),
        decoder_term=float(decoder.data),
        total=float(alpha) * float(diffusion.data) + float(beta) * float(decoder.data),
    )
    return total, bd


def _stack_batch(batch, dtype):
    images = np.stack([s.image for s in batch]).astype(dtype, copy=False)
    x0 = np.stack([s.mask_diff for s in batch]).astype(dtype, copy=False)
    gt = np.stack([s.mask_full for s in batch]).astype(dtype, copy=False)
    return images, x0, gt


def training_step(model: CrossDiffModel, optimizer: AdamW, batch, cfg: TrainConfig,
                  rng: np.random.Generator) -> LossBreakdown:
    """One optimizer update: per-sample t ~ U{0..T-1} and eps ~ N(0, I),
    full forward through both branches, weighted loss, clipped AdamW step."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = model.config.np_dtype()
    images, x0, gt = _stack_batch(batch, dtype)
    b = x0.shape[0]
    t = rng.integers(0, model.schedule.T, size=b)
    eps = rng.standard_normal(x0.shape).astype(dtype, copy=False)
    x_t = forward_noise(x0, eps, t, model.schedule)

    cond = model.encode_condition(images)
    temb = model.temb(t)
    feats = model.diffusion_unet.encode(x_t, temb)
    fused = model.diffusion_unet.fuse(cond, feats, temb, t)
    eps_hat = model.diffusion_unet.decode(fused, feats, temb)
    x_d = model.decode_mask(fused)

    total, bd = combined_loss(eps, eps_hat, x_d, gt, x0, cfg.alpha, cfg.beta)
    if not np.isfinite(bd.total):
        raise NumericError(
            f"non-finite loss: diffusion={bd.diffusion_term} decoder={bd.decoder_term}"
        )
    model.zero_grad()
    total.backward()
    clip_global_norm(model.parameters(), cfg.clip_norm)
    optimizer.step()
    model.zero_grad()
    return bd


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STEP_STREAM, int(step)]))


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    r = np.random.default_rng(np.random.SeedSequence([int(seed), _EPOCH_STREAM, int(epoch)]))
    return r.permutation(n)


def _batch_indices(seed: int, n: int, batch_size: int, step: int) -> np.ndarray:
    """Deterministic minibatch for global step ``step`` (0-based), drawn
    from concatenated per-epoch shuffles so any step's batch is a pure
    function of (seed, n, batch_size, step)."""
    if n <= 0:
        raise ValueError("dataset is empty")
    per_epoch = max(n // batch_size, 1)
    epoch, slot = divmod(step, per_epoch)
    perm = _epoch_perm(seed, epoch, n)
    if n >= batch_size:
        return perm[slot * batch_size:(slot + 1) * batch_size]
    reps = int(np.ceil(batch_size / n))
    tiled = np.concatenate([_epoch_perm(seed, epoch * reps + k, n) for k in range(reps)])
    return tiled[:batch_size]


def train(cfg: TrainConfig, dataset, out_dir=None, model: CrossDiffModel | None = None,
          model_config: ModelConfig | None = None, resume=None,
          checkpoint_name: str = "checkpoint.ckpt"):
    """Run the training loop and return the final checkpoint bundle.

    ``resume`` may be a CheckpointBundle or a path; training continues
    from its recorded step with restored optimizer state. A per-step
    JSONL log is written under ``out_dir`` when given.
    """
    from . import data as data_mod
    from pathlib import Path

    if len(dataset) == 0:
        raise ValueError("dataset is empty")

    start_step = 0
    if resume is not None:
        bundle = resume if isinstance(resume, data_mod.CheckpointBundle) else \
            data_mod.load_checkpoint(resume)
        model = data_mod.model_from_bundle(bundle)
        optimizer = AdamW(list(model.named_parameters()), lr=cfg.lr,
                          weight_decay=cfg.weight_decay)
        optimizer.load_state_arrays(bundle.arrays, bundle.step)
        start_step = bundle.step
    else:
        if model is None:
            mc = model_config if model_config is not None else preset_config(cfg.preset)
            model = build_model(mc, seed=cfg.seed)
        optimizer = AdamW(list(model.named_parameters()), lr=cfg.lr,
                          weight_decay=cfg.weight_decay)

    out_path = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_f = open(out_path / "train_log.jsonl", "a" if start_step else "w")

    n = len(dataset)
    t0 = time.time()
    try:
        for step in range(start_step, cfg.total_steps):
            idx = _batch_indices(cfg.seed, n, cfg.batch_size, step)
            batch = [dataset[i] for i in idx]
            bd = training_step(model, optimizer, batch, cfg, _step_rng(cfg.seed, step))
            if log_f is not None and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.total_steps):
                rec = {"step": step + 1, "diffusion_term": bd.diffusion_term,
                       "decoder_term": bd.decoder_term, "total": bd.total,
                       "lr": cfg.lr, "wallclock": round(time.time() - t0, 3)}
                log_f.write(json.dumps(rec) + "\n")
            if out_path is not None and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.total_steps:
                b = data_mod.bundle_from_model(model, cfg, optimizer, step + 1)
                data_mod.save_checkpoint(b, out_path / f"checkpoint_step{step + 1}.ckpt")
    finally:
        if log_f is not None:
            log_f.close()

    bundle = data_mod.bundle_from_model(model, cfg, optimizer, cfg.total_steps)
    if out_path is not None:
        data_mod.save_checkpoint(bundle, out_path / checkpoint_name)
    return bundle
