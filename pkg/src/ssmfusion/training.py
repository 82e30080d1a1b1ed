"""Optimizer, deterministic training loop, checkpointing and gradient checks.

Training is bit-reproducible for a fixed (seed, config) pair: shuffles are
seeded per epoch, batches accumulate in fixed order, and the learning rate
follows the closed form ``lr0 * 2**-floor(epoch / halve_every)``.  Resuming
from a checkpoint replays the exact history the uninterrupted run would
have produced.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks, fmt, metrics, network, ssm
from . import tensor as T
from .tensor import GradTape, NumericError, ParamStore, Tensor, UsageError, backward

log = logging.getLogger(__name__)

STATE_MATRIX_SUFFIX = ".a"
STATE_MATRIX_CEILING = -1e-4


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr0: float = 5e-4
    halve_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    eval_every: int = 1       # held-out metrics cadence (final epoch always)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def lr_at(self, epoch):
        return self.lr0 * 2.0 ** -(epoch // self.halve_every)


class Adam:
    """Standard Adam with bias correction; moments persist across steps."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, params, lr):
        missing = [name for name, t in params.items() if t.grad is None]
        if missing:
            raise UsageError(
                f"adam_step: {len(missing)} parameter(s) have no gradient, e.g. {missing[0]!r}"
            )
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in params.items():
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, lr, state):
    """One optimizer update; ``state`` is an :class:`Adam` carrying moments."""
    state.step(params, lr)


def constrain_state_matrices(params):
    """Clamp every scan state matrix strictly below zero after an update."""
    for name, t in params.items():
        if name.endswith(STATE_MATRIX_SUFFIX):
            np.minimum(t.data, STATE_MATRIX_CEILING, out=t.data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net, directory, epoch, loss, seed, opt=None):
    directory = Path(directory)
    fmt.save_params(net.params, directory / "params")
    entries = dict(net.config.to_manifest())
    entries.update({"seed": seed, "epoch": epoch, "loss": repr(float(loss))})
    fmt.write_manifest(directory / "checkpoint.manifest", entries)
    if opt is not None:
        for kind, table in (("adam_m", opt.m), ("adam_v", opt.v)):
            sub = directory / kind
            sub.mkdir(parents=True, exist_ok=True)
            for name, arr in table.items():
                fmt.write_tensor(sub / f"{name}.fmt", arr)
        fmt.write_manifest(directory / "optimizer.manifest", {"step_count": opt.step_count})


def load_checkpoint(directory, dtype=np.float32):
    """Rebuild (net, manifest) from a checkpoint directory, bit-exact."""
    directory = Path(directory)
    manifest = fmt.read_manifest(directory / "checkpoint.manifest")
    config = network.FusionNetConfig.from_manifest(manifest)
    net = network.build_fusion_net(config, seed=int(manifest["seed"]), dtype=dtype)
    saved = fmt.load_params(directory / "params")
    if saved.names() != net.params.names():
        raise fmt.FormatError("checkpoint parameters do not match the configured network")
    for name, t in saved.items():
        target = net.params[name]
        if target.data.shape != t.data.shape:
            raise fmt.FormatError(f"checkpoint parameter {name!r} has shape {t.data.shape}")
        target.data = t.data.astype(dtype)
    return net, manifest


def _load_optimizer(directory, params, cfg):
    directory = Path(directory)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    if not (directory / "optimizer.manifest").exists():
        return opt
    opt.step_count = int(fmt.read_manifest(directory / "optimizer.manifest")["step_count"])
    for kind, table in (("adam_m", opt.m), ("adam_v", opt.v)):
        for name in params.names():
            table[name] = fmt.read_tensor(directory / kind / f"{name}.fmt")
    return opt


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _stack(samples, pick):
    return Tensor(np.stack([pick(s) for s in samples], axis=0))


def _shuffled_indices(seed, epoch, count):
    # Seeded Fisher-Yates; depends only on (seed, epoch), which makes resumed
    # runs replay the exact same order.
    rng = np.random.default_rng([seed, epoch])
    idx = np.arange(count)
    for i in range(count - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def _dump_batch(out_dir, batch, epoch):
    dump = Path(out_dir) / f"diagnostic_epoch{epoch}"
    for name, arr in batch.items():
        fmt.write_tensor(dump / f"{name}.fmt", arr)
    return dump


def evaluate_fused(net, samples):
    """Mean quality indices of the network's fusion over ``samples``."""
    reports = []
    for s in samples:
        pred = network.forward(net, Tensor(s.pan), Tensor(s.lr))
        reports.append(metrics.evaluate(np.clip(pred.data, 0.0, 1.0), s.gt))
    return {
        "psnr": float(np.mean([r.psnr for r in reports])),
        "sam": float(np.mean([r.sam for r in reports])),
        "ergas": float(np.mean([r.ergas for r in reports])),
        "ssim": float(np.mean([r.ssim for r in reports])),
    }


def train(net, samples, cfg, val_samples=None, out_dir=None, resume=False):
    """Optimize ``net`` on sample triplets; returns the per-epoch history.

    Each history record carries (epoch, mean per-sample L1 loss, lr) and,
    on evaluation epochs, held-out metrics.  With ``out_dir`` set, training
    appends ``epoch=.. loss=.. lr=.. psnr=.. sam=.. ergas=..`` lines to
    ``train.log``, checkpoints per ``cfg.checkpoint_every``, and aborts with
    a diagnostic dump of the offending batch if the loss turns non-finite.
    """
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    start_epoch = 0
    opt = Adam(net.params, cfg.beta1, cfg.beta2, cfg.eps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume and (out_dir / "checkpoint.manifest").exists():
            net_loaded, manifest = load_checkpoint(out_dir)
            for name, t in net_loaded.params.items():
                net.params[name].data = t.data
            start_epoch = int(manifest["epoch"])
            opt = _load_optimizer(out_dir, net.params, cfg)
            log.info("resumed from %s at epoch %d", out_dir, start_epoch)
    log_path = out_dir / "train.log" if out_dir is not None else None

    history = []
    t_start = time.time()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = _shuffled_indices(cfg.seed, epoch, len(samples))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            chosen = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            pan = _stack(chosen, lambda s: s.pan)
            mlr = _stack(chosen, lambda s: s.lr)
            gt = _stack(chosen, lambda s: s.gt)
            net.params.zero_grads()
            with GradTape() as tape:
                pred = network.forward(net, pan, mlr)
                loss = network.l1_loss(pred, gt)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                if out_dir is not None:
                    where = _dump_batch(
                        out_dir, {"pan": pan.data, "lr": mlr.data, "gt": gt.data}, epoch
                    )
                    raise NumericError(f"non-finite loss at epoch {epoch}; batch dumped to {where}")
                raise NumericError(f"non-finite loss at epoch {epoch}")
            backward(loss, tape, net.params)
            adam_step(net.params, lr, opt)
            constrain_state_matrices(net.params)
            losses.append(loss_val)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        if val_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            record.update(evaluate_fused(net, val_samples))
        history.append(record)
        line = f"epoch={epoch} loss={record['loss']:.6f} lr={lr:.6g}"
        if "psnr" in record:
            line += f" psnr={record['psnr']:.3f} sam={record['sam']:.3f} ergas={record['ergas']:.3f}"
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        log.info("%s", line)
        if out_dir is not None and (
            (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or epoch == cfg.epochs
        ):
            save_checkpoint(net, out_dir, epoch, record["loss"], cfg.seed, opt)
    log.info("training finished in %.1fs", time.time() - t_start)
    return history


# ---------------------------------------------------------------------------
# Gradient-check harness
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    module: str
    tolerance: float
    worst: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def summary(self):
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {self.module}: worst rel err {self.worst:.3e} (tol {self.tolerance:g}) {status}"


def _build_gradcheck_case(module, seed):
    """Construct (store, named inputs, forward fn) for one module, in f64."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    f64 = np.float64

    def tin(name, shape):
        return name, Tensor(rng.standard_normal(shape), requires_grad=True, dtype=f64)

    if module == "linear":
        w = store.add("w", T.kaiming_uniform(rng, (5, 3), 5, f64))
        b = store.add("b", rng.standard_normal(3).astype(f64))
        inputs = [tin("x", (7, 5))]
        fwd = lambda x: T.linear(x, w, b)
    elif module == "conv1x1":
        w = store.add("w", T.kaiming_uniform(rng, (3, 4), 3, f64))
        b = store.add("b", rng.standard_normal(4).astype(f64))
        inputs = [tin("x", (5, 6, 3))]
        fwd = lambda x: T.conv2d_1x1(x, w, b)
    elif module == "layer_norm":
        gamma = store.add("gamma", rng.standard_normal(6).astype(f64))
        beta = store.add("beta", rng.standard_normal(6).astype(f64))
        inputs = [tin("x", (9, 6))]
        fwd = lambda x: T.layer_norm(x, gamma, beta, 1e-5)
    elif module in ("ssm_block", "fssm_block"):
        p = ssm.init_ssm_params(store, "ssm", 2, 4, rng, f64)
        if module == "ssm_block":
            inputs = [tin("x", (16, 2))]
            fwd = lambda x: ssm.ssm_block(x, p)
        else:
            inputs = [tin("x_a", (16, 2)), tin("x_b", (16, 2))]
            fwd = lambda xa, xb: ssm.fssm_block(xa, xb, p)
    elif module == "bidirectional_mamba":
        w = blocks.init_bimamba(store, "bi", 4, 4, rng, f64)
        inputs = [tin("x", (8, 4))]
        fwd = lambda x: blocks.bidirectional_mamba(x, w)
    elif module == "four_directional_mamba":
        w = blocks.init_four_directional(store, "fd", 3, 4, rng, f64)
        inputs = [tin("x", (4, 5, 3))]
        fwd = lambda x: blocks.four_directional_mamba(x, w)
    elif module == "fusion_mamba_block":
        w = blocks.init_fusion_mamba(store, "fm", 4, 4, rng, f64)
        inputs = [tin("f_a", (4, 4, 4)), tin("f_b", (4, 4, 4))]
        fwd = lambda fa, fb: blocks.fusion_mamba_block(fa, fb, w)[0]
    elif module == "network":
        cfg = network.FusionNetConfig(bands=4, channels=8, state_size=4, upsample="bicubic")
        net = network.build_fusion_net(cfg, seed=seed, dtype=f64)
        store = net.params
        pan = Tensor(rng.uniform(0, 1, (16, 16, 1)), requires_grad=True, dtype=f64)
        mlr = Tensor(rng.uniform(0, 1, (4, 4, 4)), requires_grad=True, dtype=f64)
        inputs = [("pan", pan), ("lr", mlr)]
        fwd = lambda p_, m_: network.forward(net, p_, m_)
    else:
        raise ValueError(f"unknown gradcheck module {module!r}")
    return store, inputs, fwd


GRADCHECK_MODULES = (
    "linear",
    "conv1x1",
    "layer_norm",
    "ssm_block",
    "fssm_block",
    "bidirectional_mamba",
    "four_directional_mamba",
    "fusion_mamba_block",
    "network",
)


def gradcheck(module, tolerance=1e-4, seed=0, step=1e-5, max_coords=4):
    """Compare analytic gradients against central finite differences (f64).

    The probe loss is a fixed random weighting of the module output.  Every
    parameter tensor and input is checked; tensors larger than
    ``max_coords`` entries are sampled at ``max_coords`` seeded coordinates.
    Relative error uses ``|a - fd| / max(|a|, |fd|, 1e-3)``.
    """
    store, inputs, fwd = _build_gradcheck_case(module, seed)
    rng = np.random.default_rng(seed + 1)
    tensors = dict(inputs)
    args = [t for _, t in inputs]
    probe = None

    def loss_value():
        nonlocal probe
        out = fwd(*args)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return float((out.data * probe).sum())

    loss_value()  # fix the probe
    with GradTape() as tape:
        out = fwd(*args)
        loss = T.sum_all(T.mul(out, Tensor(probe, dtype=np.float64)))
    backward(loss, tape, store)

    coord_rng = np.random.default_rng(seed + 2)
    report = GradcheckReport(module=module, tolerance=tolerance, worst=0.0)
    for name, t in list(store.items()) + list(tensors.items()):
        flat = t.data.reshape(-1)
        gflat = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = coord_rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_value()
            flat[i] = orig - step
            f_minus = loss_value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = gflat[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-3))
        report.per_param[name] = worst
        report.worst = max(report.worst, worst)
    return report
