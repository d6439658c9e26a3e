"""Training and evaluation drivers behind the CLI."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import Config, serialize
from .data import IdxDataset, load_idx, mse, save_image_grid, ssim
from .diffusion import SDID, DiffusionSchedule, diffusion_loss, generate_images, sample
from .optim import AdamW
from .vqsvae import VQSVAE, perplexity

log = logging.getLogger(__name__)

# independent RNG streams spawned from the config seed
# new streams go at the end: spawn order fixes each child, so appending keeps older streams unchanged
STREAMS = ("vq_init", "vq_shuffle", "sdid_init", "sdid_shuffle", "sdid_corrupt", "heldout", "sample", "vq_restart")


class TrainingAborted(RuntimeError):
    pass


def rng_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(STREAMS, children)}


def thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def load_train(cfg: Config) -> IdxDataset:
    data = load_idx(cfg.train_images, cfg.train_labels or None, transpose=cfg.dataset == "letters")
    return data.subset(min(cfg.subset, len(data)))


def load_test(cfg: Config) -> IdxDataset:
    return load_idx(cfg.test_images, cfg.test_labels or None, transpose=cfg.dataset == "letters")


def _write_csv(path: Path, header: List[str], rows: List[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# ------------------------------------------------------------------ stage 1


def build_vqsvae(cfg: Config, rng=None) -> VQSVAE:
    rng = rng if rng is not None else rng_streams(cfg.seed)["vq_init"]
    return VQSVAE(cfg.vqsvae, rng)


def save_vqsvae(model: VQSVAE, cfg: Config, path) -> Path:
    meta = {"kind": "vqsvae", "config": serialize(cfg).replace("\n", ";")}
    meta.update(K=str(model.cfg.codebook_size), C=str(model.cfg.latent), steps=str(model.cfg.steps))
    return checkpoint.save(path, model.state_dict(), meta)


def load_vqsvae(cfg: Config, path) -> VQSVAE:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "vqsvae":
        raise checkpoint.CheckpointError(f"{path}: not a VQ-SVAE checkpoint (kind={meta.get('kind')!r})")
    for key, want in (("K", cfg.codebook_size), ("C", cfg.latent), ("steps", cfg.steps)):
        if key in meta and int(meta[key]) != want:
            raise checkpoint.CheckpointError(f"{path}: checkpoint has {key}={meta[key]}, config has {key}={want}")
    model = build_vqsvae(cfg)
    model.load_state_dict(arrays)
    return model


CODEBOOK_INIT_IMAGES = 256
KMEANS_ITERS = 20

VQ_LOG_FIELDS = ["epoch", "total", "recon", "vq", "asg", "commit", "mse", "ssim_loss", "perplexity", "k_mix", "seconds"]


def train_vqsvae(cfg: Config, data: Optional[IdxDataset] = None, out_dir=None) -> dict:
    """Train stage 1; writes the checkpoint and a per-epoch CSV log. Returns a summary."""
    out_dir = Path(out_dir or cfg.out_dir)
    data = data if data is not None else load_train(cfg)
    streams = rng_streams(cfg.seed)
    rows = []
    with thread_limit(cfg.thread_count):
        model = build_vqsvae(cfg, streams["vq_init"])
        if cfg.codebook_init != "uniform":
            iters = KMEANS_ITERS if cfg.codebook_init == "kmeans" else 0
            filled = model.init_codebook_from(data.images[:CODEBOOK_INIT_IMAGES], streams["vq_init"], iters)
            log.info("codebook: %d of %d rows set from encoder readouts", filled, cfg.codebook_size)
        opt = AdamW(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        images = data.images
        n = len(images)
        for epoch in range(1, cfg.epochs + 1):
            start = time.time()
            order = streams["vq_shuffle"].permutation(n)
            sums: Dict[str, float] = {}
            usage = np.zeros(cfg.codebook_size, dtype=np.int64)
            batches = 0
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                x = images[order[lo : lo + cfg.batch_size]]
                out = model(x)
                try:
                    total, terms = model.loss(x, out)
                except FloatingPointError as exc:
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}") from None
                model.zero_grad()
                total.backward()
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}") from None
                terms["mse"] = mse(x, out.x_hat.data)
                terms["ssim_loss"] = 1.0 - ssim(x, out.x_hat.data)
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                usage += np.bincount(out.tokens.ravel(), minlength=cfg.codebook_size)
                batches += 1
            if cfg.codebook_restart and epoch < cfg.epochs:
                moved = model.restart_codes(usage == 0, out.z_e.data, streams["vq_restart"])
                log.info("epoch %d: %d unused codebook rows restarted", epoch, moved)
            row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
            row["perplexity"] = perplexity(np.repeat(np.arange(cfg.codebook_size), usage), cfg.codebook_size)
            row["k_mix"] = float(1 / (1 + np.exp(-model.codebook.k_mix.data[0])))
            row["seconds"] = time.time() - start
            rows.append(row)
            log.info("vqsvae epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})
    ckpt = save_vqsvae(model, cfg, cfg.vqsvae_ckpt)
    _write_csv(out_dir / "vqsvae_metrics.csv", VQ_LOG_FIELDS, rows)
    return {"model": model, "checkpoint": ckpt, "metrics": rows}


def reconstruct(model: VQSVAE, images: np.ndarray, batch: int = 128):
    """Images -> (reconstructions, tokens) without building a graph."""
    outs, toks = [], []
    with ad.no_grad():
        for lo in range(0, len(images), batch):
            o = model(images[lo : lo + batch])
            outs.append(o.x_hat.data)
            toks.append(o.tokens)
    return np.concatenate(outs), np.concatenate(toks)


def encode_tokens(model: VQSVAE, images: np.ndarray, batch: int = 128) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([model.encode(images[lo : lo + batch]) for lo in range(0, len(images), batch)])


def reconstruction_metrics(model: VQSVAE, images: np.ndarray) -> dict:
    x_hat, tokens = reconstruct(model, images)
    return {
        "mse": mse(images, x_hat),
        "ssim_loss": 1.0 - ssim(images, x_hat),
        "perplexity": perplexity(tokens, model.cfg.codebook_size),
        "x_hat": x_hat,
        "tokens": tokens,
    }


# ------------------------------------------------------------------ stage 2


def build_sdid(cfg: Config, grid, rng=None) -> SDID:
    rng = rng if rng is not None else rng_streams(cfg.seed)["sdid_init"]
    return SDID(cfg.sdid(grid), rng)


def save_sdid(model: SDID, cfg: Config, path) -> Path:
    H, W = model.cfg.grid
    meta = {"kind": "sdid", "config": serialize(cfg).replace("\n", ";"), "K": str(model.cfg.codebook_size),
            "H": str(H), "W": str(W), "T_d": str(model.cfg.diffusion_steps)}
    return checkpoint.save(path, model.state_dict(), meta)


def load_sdid(cfg: Config, path, vqsvae: Optional[VQSVAE] = None) -> SDID:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "sdid":
        raise checkpoint.CheckpointError(f"{path}: not an SDID checkpoint (kind={meta.get('kind')!r})")
    grid = (int(meta["H"]), int(meta["W"]))
    if int(meta["K"]) != cfg.codebook_size:
        raise checkpoint.CheckpointError(
            f"{path}: SDID trained for K={meta['K']}, config has K={cfg.codebook_size}"
        )
    model = build_sdid(cfg, grid)
    model.load_state_dict(arrays)
    return model


def heldout_loss(model: SDID, tokens: np.ndarray, sched: DiffusionSchedule, seed: int, batch: int = 128) -> float:
    """Diffusion loss on fixed grids with a fixed RNG, so values are comparable across epochs."""
    rng = np.random.Generator(np.random.Philox(seed))
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(tokens), batch):
            chunk = tokens[lo : lo + batch]
            loss, _ = diffusion_loss(model, chunk, sched, rng)
            total += loss.item() * len(chunk)
    return total / len(tokens)


SDID_LOG_FIELDS = ["epoch", "train_loss", "masked_ce", "heldout_loss", "seconds"]


def train_sdid(cfg: Config, vqsvae: VQSVAE, data: Optional[IdxDataset] = None, out_dir=None,
               heldout: Optional[IdxDataset] = None) -> dict:
    """Train stage 2 on tokens from the frozen autoencoder."""
    out_dir = Path(out_dir or cfg.out_dir)
    data = data if data is not None else load_train(cfg)
    streams = rng_streams(cfg.seed)
    sched = DiffusionSchedule(cfg.diffusion_steps)
    frozen = {k: v.copy() for k, v in vqsvae.state_dict().items()}
    rows = []
    with thread_limit(cfg.thread_count):
        tokens = encode_tokens(vqsvae, data.images)
        grid = tokens.shape[1:]
        if vqsvae.cfg.codebook_size != cfg.codebook_size:
            raise ValueError(
                f"stage-1 checkpoint has K={vqsvae.cfg.codebook_size}, config K={cfg.codebook_size}"
            )
        if heldout is None:
            try:
                heldout = load_test(cfg)
            except (OSError, ValueError):
                heldout = None
        held_tokens = encode_tokens(vqsvae, heldout.images[:512]) if heldout is not None else tokens[:512]
        if held_tokens.shape[1:] != grid:
            raise ValueError(f"held-out grids {held_tokens.shape[1:]} != training grids {grid} (H', W')")
        held_seed = int(streams["heldout"].integers(2**32))
        model = build_sdid(cfg, grid, streams["sdid_init"])
        opt = AdamW(model.named_parameters(), cfg.sdid_lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        rows.append({"epoch": 0, "heldout_loss": heldout_loss(model, held_tokens, sched, held_seed)})
        n = len(tokens)
        for epoch in range(1, cfg.sdid_epochs + 1):
            start = time.time()
            order = streams["sdid_shuffle"].permutation(n)
            loss_sum = ce_sum = 0.0
            batches = 0
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                h0 = tokens[order[lo : lo + cfg.batch_size]]
                loss, info = diffusion_loss(model, h0, sched, streams["sdid_corrupt"])
                if not np.isfinite(info["loss"]):
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: non-finite diffusion loss")
                model.zero_grad()
                loss.backward()
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}") from None
                loss_sum += info["loss"]
                ce_sum += info["masked_ce"]
                batches += 1
            row = {
                "epoch": epoch,
                "train_loss": loss_sum / batches,
                "masked_ce": ce_sum / batches,
                "heldout_loss": heldout_loss(model, held_tokens, sched, held_seed),
                "seconds": time.time() - start,
            }
            rows.append(row)
            log.info("sdid epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})
    for k, v in vqsvae.state_dict().items():
        if not np.array_equal(v, frozen[k]):
            raise RuntimeError(f"stage-1 parameter {k} changed during stage-2 training")
    ckpt = save_sdid(model, cfg, cfg.sdid_ckpt)
    _write_csv(out_dir / "sdid_metrics.csv", SDID_LOG_FIELDS, rows)
    return {"model": model, "checkpoint": ckpt, "metrics": rows, "tokens": tokens}


OVERFIT_LR = 3e-3


def overfit_single_grid(cfg: Config, grid_tokens: np.ndarray, steps: int = 200, batch: int = 16,
                        lr: float = OVERFIT_LR) -> dict:
    """Fit the denoiser to one grid; returns the masked CE curve and final evaluation."""
    streams = rng_streams(cfg.seed)
    sched = DiffusionSchedule(cfg.diffusion_steps)
    model = build_sdid(cfg, grid_tokens.shape, streams["sdid_init"])
    opt = AdamW(model.named_parameters(), lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    h0 = np.broadcast_to(grid_tokens, (batch,) + grid_tokens.shape).copy()
    curve = []
    with thread_limit(cfg.thread_count):
        for _ in range(steps):
            loss, info = diffusion_loss(model, h0, sched, streams["sdid_corrupt"])
            model.zero_grad()
            loss.backward()
            opt.step()
            curve.append(info["masked_ce"])
        # evaluate on fresh corruptions at every t
        eval_rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
        t = np.tile(np.arange(1, sched.steps + 1), 4)
        with ad.no_grad():
            _, info = diffusion_loss(model, np.broadcast_to(grid_tokens, (len(t),) + grid_tokens.shape).copy(),
                                     sched, eval_rng, t=t)
    return {"model": model, "curve": curve, "final_masked_ce": info["masked_ce"]}


# ------------------------------------------------------------------ commands


def run_reconstruct(cfg: Config, out_dir, n: int = 16) -> dict:
    model = load_vqsvae(cfg, cfg.vqsvae_ckpt)
    data = load_train(cfg)
    with thread_limit(cfg.thread_count):
        metrics = reconstruction_metrics(model, data.images)
    out_dir = Path(out_dir)
    save_image_grid(data.images[:n], out_dir / "reconstruct_input.png")
    save_image_grid(metrics["x_hat"][:n], out_dir / "reconstruct_output.png")
    return {k: metrics[k] for k in ("mse", "ssim_loss", "perplexity")}


def run_sample(cfg: Config, out_dir, n: int = 16) -> dict:
    vq = load_vqsvae(cfg, cfg.vqsvae_ckpt)
    sdid = load_sdid(cfg, cfg.sdid_ckpt)
    rng = rng_streams(cfg.seed)["sample"]
    with thread_limit(cfg.thread_count):
        images, grids = generate_images(sdid, vq, n, DiffusionSchedule(cfg.diffusion_steps), rng,
                                        cfg.temperature, cfg.reveal_order)
    out_dir = Path(out_dir)
    path = save_image_grid(images, out_dir / "samples.png")
    np.save(out_dir / "sampled_tokens.npy", grids)
    return {"n": n, "path": str(path), "perplexity": perplexity(grids, cfg.codebook_size)}


def run_eval(cfg: Config, n: int = 64) -> dict:
    model = load_vqsvae(cfg, cfg.vqsvae_ckpt)
    with thread_limit(cfg.thread_count):
        train = reconstruction_metrics(model, load_train(cfg).images)
        report = {
            "train_mse": train["mse"],
            "train_ssim_loss": train["ssim_loss"],
            "train_perplexity": train["perplexity"],
        }
        try:
            test = reconstruction_metrics(model, load_test(cfg).images)
        except (OSError, ValueError):
            test = None
        if test is not None:
            report.update(test_mse=test["mse"], test_ssim_loss=test["ssim_loss"], test_perplexity=test["perplexity"])
        if Path(cfg.sdid_ckpt).exists():
            sdid = load_sdid(cfg, cfg.sdid_ckpt)
            sched = DiffusionSchedule(cfg.diffusion_steps)
            rng = rng_streams(cfg.seed)["sample"]
            H, W = sdid.cfg.grid
            grids = sample(sdid, sched, (n, H, W), rng, cfg.temperature, cfg.reveal_order)
            report["sample_perplexity"] = perplexity(grids, cfg.codebook_size)
            report["sample_token_overlap"] = token_overlap(grids, train["tokens"], cfg.codebook_size)
            report["heldout_diffusion_loss"] = heldout_loss(sdid, train["tokens"][:512], sched, cfg.seed)
    return report


def token_overlap(sampled: np.ndarray, reference: np.ndarray, K: int) -> float:
    """Histogram intersection between sampled and reference token distributions (1 = identical)."""
    p = np.bincount(sampled.ravel(), minlength=K) / sampled.size
    q = np.bincount(reference.ravel(), minlength=K) / reference.size
    return float(np.minimum(p, q).sum())
