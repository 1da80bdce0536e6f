"""Joint adversarial training of the UNet-VAE and PatchGAN discriminator.

Every source of randomness is derived from (base seed, step index), so a
run restarted from a checkpoint replays the remaining steps exactly.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .injection import mix_batch, plan_batch
from .localizer import PatchPair
from .losses import (
    LOSS_COLUMNS, FTLParams, LossRecord, LossWeights, adversarial_d_loss, adversarial_g_loss,
    focal_tversky_loss, kl_loss, mse_loss, perceptual_loss, total_generator_loss,
)
from .metrics import MetricReport, binarize, patch_metrics
from .models import ModelConfig, PatchDiscriminator, ToyPerceptualExtractor, UNetVAE

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1
# step key for the frozen bank; far beyond any real step count
BANK_STREAM = 2**48


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be > 0")


@dataclass(frozen=True)
class Seeds:
    data: int = 1
    noise: int = 2


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on. The model init seed is ``model.seed``."""

    model: ModelConfig = ModelConfig()
    loss_weights: LossWeights = LossWeights()
    ftl: FTLParams = FTLParams()
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 8
    epochs: int = 3
    ratio: float = 0.0
    warmup_epochs: int = 1
    synth_tau: float = 1.0
    synth_mode: str = "live"
    seeds: Seeds = Seeds()
    checkpoint_every: int = 0
    eval_every: int = 0
    holdout_fraction: float = 0.2
    seg_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("ratio must lie in [0, 1]")
        if self.synth_mode not in ("live", "frozen"):
            raise ConfigError("synth_mode must be 'live' or 'frozen'")
        if self.warmup_epochs < 0 or self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("warmup_epochs, checkpoint_every and eval_every must be >= 0")
        if self.synth_tau <= 0:
            raise ConfigError("synth_tau must be > 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Strict parse: every field must be present and no unknown key is allowed."""
        try:
            return _build(cls, d, "")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    missing = set(names) - set(d)
    if missing:
        raise ConfigError(f"missing keys in {where or 'config'}: {sorted(missing)}")
    kw = {}
    for name, f in names.items():
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), d[name], f"{where}{name}.")
        else:
            kw[name] = d[name]
    return cls(**kw)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class TrainState:
    config: RunConfig
    generator: UNetVAE
    discriminator: PatchDiscriminator
    extractor: ToyPerceptualExtractor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    synth_bank: Optional[list] = None
    synth_calls: int = 0


def new_state(config: RunConfig) -> TrainState:
    g = UNetVAE(config.model)
    d = PatchDiscriminator(config.model)
    o = config.optimizer
    return TrainState(
        config=config,
        generator=g,
        discriminator=d,
        extractor=ToyPerceptualExtractor(),
        opt_g=torch.optim.Adam(g.parameters(), lr=o.lr_g, betas=(o.beta1, o.beta2)),
        opt_d=torch.optim.Adam(d.parameters(), lr=o.lr_d, betas=(o.beta1, o.beta2)),
    )


def derive_seed(base: int, step: int) -> int:
    """Independent 63-bit seed for one (stream, step) pair."""
    a, b = np.random.SeedSequence([int(base), int(step)]).generate_state(2)
    return int((int(a) << 32 | int(b)) & (2**63 - 1))


def to_tensors(batch: Sequence[PatchPair]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([p.image for p in batch]).astype(np.float32)).unsqueeze(1)
    y = torch.from_numpy(np.stack([p.mask for p in batch]).astype(np.float32)).unsqueeze(1)
    return x, y


def _check_grads(module: torch.nn.Module, name: str) -> None:
    for pname, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteLossError(f"non-finite gradient in {name}.{pname}; step not applied")


def _require_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite loss component {name!r}: {float(value.detach())}")


def discriminator_step(state: TrainState, real: torch.Tensor, fake: torch.Tensor) -> float:
    """One D update on real images vs (detached) reconstructions."""
    d = state.discriminator
    d.train()
    loss = adversarial_d_loss(d(real), d(fake.detach()))
    _require_finite("adv_d", loss)
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    _check_grads(d, "discriminator")
    if state.config.optimizer.grad_clip:
        torch.nn.utils.clip_grad_norm_(d.parameters(), state.config.optimizer.grad_clip)
    state.opt_d.step()
    return float(loss.detach())


def generator_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, out) -> dict:
    """One G update on the weighted total. D weights receive no gradient."""
    cfg = state.config
    d = state.discriminator
    d.requires_grad_(False)
    try:
        comps = {
            "recon": mse_loss(out.recon, x),
            "perceptual": perceptual_loss(out.recon, x, state.extractor),
            "kl": kl_loss(out.latent.mu, out.latent.logvar),
            "seg": focal_tversky_loss(out.seg_prob, y, cfg.ftl),
            "adv_g": adversarial_g_loss(d(out.recon)),
        }
    finally:
        d.requires_grad_(True)
    for name, v in comps.items():
        _require_finite(name, v)
    total = total_generator_loss(comps, cfg.loss_weights)
    _require_finite("total_g", total)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _check_grads(state.generator, "generator")
    if cfg.optimizer.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.optimizer.grad_clip)
    state.opt_g.step()
    vals = {k: float(v.detach()) for k, v in comps.items()}
    vals["total_g"] = float(total.detach())
    return vals


def train_step(batch: Sequence[PatchPair], state: TrainState) -> tuple[TrainState, LossRecord]:
    if not batch:
        raise ValueError("empty batch")
    x, y = to_tensors(batch)
    gen = torch.Generator().manual_seed(derive_seed(state.config.seeds.noise, state.step))
    state.generator.train()
    out = state.generator(x, generator=gen)
    adv_d = discriminator_step(state, x, out.recon)
    vals = generator_step(state, x, y, out)
    state.step += 1
    return state, LossRecord(adv_d=adv_d, **vals)


def steps_per_epoch(n_pool: int, batch_size: int) -> int:
    return math.ceil(n_pool / min(batch_size, n_pool))


def _synthetic_source(state: TrainState, pool: Sequence[PatchPair]):
    cfg = state.config

    def live(src: PatchPair, seed: int) -> PatchPair:
        state.synth_calls += 1
        return state.generator.generate_synthetic(src, cfg.synth_tau, seed, cfg.seg_threshold)

    if cfg.synth_mode == "live":
        return live
    if state.synth_bank is None:
        bank_seed = derive_seed(cfg.seeds.noise, BANK_STREAM)
        state.synth_bank = [live(p, derive_seed(bank_seed, i)) for i, p in enumerate(pool)]
    index = {id(p): i for i, p in enumerate(pool)}
    bank = state.synth_bank
    return lambda src, seed: bank[index[id(src)]]


@contextlib.contextmanager
def _single_thread():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def train(config: RunConfig, dataset: Sequence[PatchPair], eval_patches: Optional[Sequence[PatchPair]] = None,
          out_dir=None, resume=None, max_steps: Optional[int] = None):
    """Run ``epochs`` x ``steps_per_epoch`` joint steps.

    Args:
        config: run configuration.
        dataset: real training patches (the pool batches are drawn from).
        eval_patches: held-out patches for the cadence / final evaluation.
        out_dir: if given, receives ``losses.csv``, ``checkpoints/`` and
            ``metrics.csv``.
        resume: a :class:`TrainState` or checkpoint path to continue from.
        max_steps: stop after this global step count (for interruption).

    Returns:
        (final TrainState, list of (step, LossRecord) for the steps run here).
    """
    pool = list(dataset)
    if not pool:
        raise ValueError("dataset is empty")
    if resume is None:
        state = new_state(config)
    elif isinstance(resume, TrainState):
        state = resume
    else:
        state = load_checkpoint(resume, config)
    batch_size = min(config.batch_size, len(pool))
    spe = steps_per_epoch(len(pool), config.batch_size)
    total = config.epochs * spe if max_steps is None else min(max_steps, config.epochs * spe)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        loss_path = out / "losses.csv"
        fresh = state.step == 0 or not loss_path.exists()
        fh = open(loss_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOSS_COLUMNS)

    history = []
    try:
        with _single_thread():
            while state.step < total:
                step = state.step
                epoch = step // spe
                ratio = config.ratio if epoch >= config.warmup_epochs else 0.0
                plan = plan_batch(batch_size, ratio)
                source = _synthetic_source(state, pool) if plan.n_synth else None
                state.generator.eval()
                batch = mix_batch(pool, source, plan, derive_seed(config.seeds.data, step))
                state, rec = train_step(batch, state)
                history.append((step, rec))
                if writer is not None:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in rec.row(step)])
                if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    save_checkpoint(state, out / "checkpoints" / f"step-{state.step:06d}.ckpt")
                if (eval_patches and config.eval_every and state.step % spe == 0
                        and (state.step // spe) % config.eval_every == 0):
                    rep = evaluate(state, eval_patches)
                    log.info("epoch %d: %s", state.step // spe, rep.aggregate)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / f"step-{state.step:06d}.ckpt")
        if eval_patches:
            (out / "metrics.csv").write_text(evaluate(state, eval_patches, ratio=config.ratio).to_csv())
    return state, history


@torch.no_grad()
def evaluate(model, eval_patches: Sequence[PatchPair], threshold: float = 0.5, ratio=None,
             keep: int = 0, chunk: int = 32) -> MetricReport:
    """Eval-mode forward (eps = 0) on every patch and the ten metrics.

    ``model`` is a :class:`TrainState` or any module returning a
    ModelOutput. The first ``keep`` patches' inputs, reconstructions and
    thresholded masks are attached as ``report.samples``.
    """
    if isinstance(model, TrainState):
        threshold = model.config.seg_threshold
        model = model.generator
    patches = list(eval_patches)
    if not patches:
        raise ValueError("empty evaluation set")
    was_training = model.training
    model.eval()
    rows, samples = [], []
    try:
        for start in range(0, len(patches), chunk):
            part = patches[start : start + chunk]
            x, _ = to_tensors(part)
            out = model(x)
            recon = out.recon[:, 0].double().numpy()
            seg = out.seg_prob[:, 0].double().numpy()
            for i, p in enumerate(part):
                pred = binarize(seg[i], threshold)
                rows.append(patch_metrics(recon[i], p.image, pred, p.mask))
                if len(samples) < keep:
                    samples.append({"image": p.image.copy(), "recon": recon[i].astype(np.float32),
                                    "pred": pred, "mask": p.mask.copy()})
    finally:
        model.train(was_training)
    report = MetricReport(rows, ratio=ratio)
    report.samples = samples
    return report


# checkpoint container: magic, u32 version, u64 header length, JSON header,
# then little-endian f32 tensors at the offsets the header lists

def _state_tensors(state: TrainState) -> dict:
    tensors = {}
    for prefix, mod in (("generator", state.generator), ("discriminator", state.discriminator),
                        ("perceptual", state.extractor)):
        for k, v in mod.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for idx, st in opt.state_dict()["state"].items():
            for k, v in st.items():
                tensors[f"{prefix}.{idx}.{k}"] = torch.as_tensor(v)
    if state.synth_bank is not None:
        tensors["bank.images"] = torch.from_numpy(np.stack([p.image for p in state.synth_bank]))
        tensors["bank.masks"] = torch.from_numpy(np.stack([p.mask for p in state.synth_bank]).astype(np.float32))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    tensors = _state_tensors(state)
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} has dtype {arr.dtype}; checkpoints hold f32 only")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": state.config.to_dict(),
        "step": state.step,
        "rng": {"scheme": "derived-per-step", "data_seed": state.config.seeds.data,
                "noise_seed": state.config.seeds.noise, "next_step": state.step},
        "synth_calls": state.synth_calls,
        "tensors": index,
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, {name: float32 ndarray})."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    body = memoryview(data)[start + hlen:]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"truncated checkpoint at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(body[e["offset"]:end], dtype="<f4").reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, config: Optional[RunConfig] = None) -> TrainState:
    header, arrays = read_checkpoint(path)
    stored = RunConfig.from_dict(header["config"])
    if config is None:
        config = stored
    elif stored.model != config.model:
        raise CheckpointError(f"checkpoint model config {stored.model} incompatible with {config.model}")
    state = new_state(config)

    def pick(prefix):
        return {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")}

    try:
        state.generator.load_state_dict(pick("generator"))
        state.discriminator.load_state_dict(pick("discriminator"))
        state.extractor.load_state_dict(pick("perceptual"))
    except RuntimeError as e:
        raise CheckpointError(str(e)) from e
    for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        sd = opt.state_dict()
        per_param: dict = {}
        for k, v in pick(prefix).items():
            idx, name = k.split(".", 1)
            per_param.setdefault(int(idx), {})[name] = v
        sd["state"] = per_param
        opt.load_state_dict(sd)
    if "bank.images" in arrays:
        state.synth_bank = [PatchPair(img, m.astype(np.uint8), provenance="synthetic")
                            for img, m in zip(arrays["bank.images"], arrays["bank.masks"])]
    state.step = int(header["step"])
    state.synth_calls = int(header.get("synth_calls", 0))
    return state


def split_holdout(patches: Sequence[PatchPair], fraction: float) -> tuple[list, list]:
    """Deterministic split: the last ``fraction`` of the list is held out."""
    n_eval = int(round(len(patches) * fraction))
    if fraction > 0 and n_eval == 0 and len(patches) > 1:
        n_eval = 1
    cut = len(patches) - n_eval
    return list(patches[:cut]), list(patches[cut:])
