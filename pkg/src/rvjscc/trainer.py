"""Joint optimization, quality metrics, LR schedule, and the ablation runner.

The training objective averages, over all GoP frames of a clip, the pixel
MSE between original and reconstructed frames plus lambda times the MSE
between the transmitted latent and the receiver-stage output. The latent
term only supervises variants that carry the decoupled denoiser; for the
others lambda is forced to zero.

The learning rate follows a reduce-on-plateau rule: after `patience`
consecutive epochs without validation improvement the rate is multiplied by
`factor` (and the plateau counter restarts); training stops outright after
`stop_patience` consecutive non-improving epochs. The best-validation
parameters are restored at the end.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .nn_blocks import SnrContext
from .video_codec import SequenceResult, VideoTransceiver, load_checkpoint

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
_MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# ------------------------------------------------------------------ metrics


def joint_loss(
    frames: torch.Tensor,
    frames_hat: torch.Tensor,
    latents: list[torch.Tensor],
    latents_tilde: list[torch.Tensor],
    lam: float,
) -> torch.Tensor:
    """Mean over frames of pixel MSE plus lam times per-element latent MSE.

    The latent MSE is taken over the real-pair representation of the padded
    symbols. Latent lists may be empty, in which case the term vanishes.
    """
    if frames.shape != frames_hat.shape:
        raise ValueError("frame stacks differ in shape")
    if len(latents) != len(latents_tilde):
        raise ValueError("latent list lengths differ")
    total = (frames - frames_hat).square().mean(dim=(1, 2, 3)).mean()
    if lam != 0.0 and latents:
        per_frame = [
            (torch.view_as_real(z) - torch.view_as_real(zt)).square().mean()
            for z, zt in zip(latents, latents_tilde)
        ]
        total = total + lam * torch.stack(per_frame).mean()
    return total


def latent_mse(latents: list[torch.Tensor], latents_tilde: list[torch.Tensor]) -> float:
    """Diagnostic per-element latent MSE (real-pair representation)."""
    if not latents:
        return math.nan
    vals = [
        (torch.view_as_real(z.detach()) - torch.view_as_real(zt.detach())).square().mean()
        for z, zt in zip(latents, latents_tilde)
    ]
    return float(torch.stack(vals).mean())


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """PSNR in dB on 8-bit scale, averaged over frames, capped at 100 dB."""
    if x.shape != x_hat.shape:
        raise ValueError("shapes differ")
    a = (x if x.ndim == 4 else x.unsqueeze(0)).detach()
    b = (x_hat if x_hat.ndim == 4 else x_hat.unsqueeze(0)).detach()
    mse = (255.0 * (a.double() - b.double())).square().mean(dim=(1, 2, 3))
    vals = []
    for m in mse:
        if m == 0:
            vals.append(PSNR_CAP_DB)
        else:
            vals.append(min(10.0 * math.log10(255.0**2 / float(m)), PSNR_CAP_DB))
    return sum(vals) / len(vals)


def _gaussian_window(size: int, sigma: float, channels: int, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-coords.square() / (2 * sigma * sigma))
    g = g / g.sum()
    win2d = torch.outer(g, g)
    return win2d.expand(channels, 1, size, size).contiguous()


def _ssim_and_contrast(
    x: torch.Tensor, y: torch.Tensor, window: torch.Tensor, data_range: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-frame mean SSIM and contrast-structure terms (valid windows only)."""
    c = x.shape[1]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = F.conv2d(x, window, groups=c)
    mu_y = F.conv2d(y, window, groups=c)
    sxx = F.conv2d(x * x, window, groups=c) - mu_x.square()
    syy = F.conv2d(y * y, window, groups=c) - mu_y.square()
    sxy = F.conv2d(x * y, window, groups=c) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = ((2 * mu_x * mu_y + c1) / (mu_x.square() + mu_y.square() + c1)) * cs_map
    return ssim_map.mean(dim=(1, 2, 3)), cs_map.mean(dim=(1, 2, 3))


def ms_ssim(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0) -> float:
    """Multi-scale SSIM averaged over frames.

    Uses the standard five scales with an 11-tap Gaussian window when the
    frames are large enough; smaller frames fall back to however many scales
    fit (weights renormalized), which is logged as a reduced-scale result.
    """
    if x.shape != x_hat.shape:
        raise ValueError("shapes differ")
    a = (x if x.ndim == 4 else x.unsqueeze(0)).detach().double()
    b = (x_hat if x_hat.ndim == 4 else x_hat.unsqueeze(0)).detach().double()

    size = min(a.shape[-2], a.shape[-1])
    win = 11 if size >= 11 else (size if size % 2 else size - 1)
    scales = 1
    while scales < len(_MS_SSIM_WEIGHTS) and (size // 2**scales) >= win:
        scales += 1
    if scales < len(_MS_SSIM_WEIGHTS) or win < 11:
        logger.info("ms_ssim reduced to %d scales (window %d) for %dpx frames", scales, win, size)
    weights = torch.tensor(_MS_SSIM_WEIGHTS[:scales], dtype=a.dtype)
    weights = weights / weights.sum()

    window = _gaussian_window(win, 1.5, a.shape[1], a.dtype, a.device)
    terms = []
    for level in range(scales):
        ssim_val, cs_val = _ssim_and_contrast(a, b, window, data_range)
        terms.append(F.relu(ssim_val if level == scales - 1 else cs_val))
        if level < scales - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    stacked = torch.stack(terms, dim=0)  # (scales, frames)
    per_frame = torch.prod(stacked ** weights[:, None], dim=0)
    return float(per_frame.mean())


# -------------------------------------------------------------- LR schedule


@dataclass(frozen=True)
class LrState:
    """Reduce-on-plateau state. lr is always init_lr * factor**reductions, so
    the advertised exact-rate invariant holds with no float drift."""

    lr: float
    bad_epochs: int = 0
    stall_epochs: int = 0
    reductions: int = 0
    init_lr: float = field(default=math.nan)
    stop: bool = False

    def __post_init__(self):
        if math.isnan(self.init_lr):
            object.__setattr__(self, "init_lr", self.lr)


def lr_step(
    state: LrState,
    improved: bool,
    factor: float = 0.8,
    patience: int = 4,
    stop_patience: int = 8,
) -> LrState:
    """Advance the schedule by one epoch's validation outcome."""
    if improved:
        return LrState(state.lr, 0, 0, state.reductions, state.init_lr, False)
    bad = state.bad_epochs + 1
    stall = state.stall_epochs + 1
    reductions = state.reductions
    if bad >= patience:
        reductions += 1
        bad = 0
    lr = state.init_lr * factor**reductions
    return LrState(lr, bad, stall, reductions, state.init_lr, stall >= stop_patience)


# ------------------------------------------------------------------ records


@dataclass
class MetricsRecord:
    config_tag: str
    snr_db: float
    psnr_db: float
    ms_ssim: float
    loss: float
    latent_mse: float
    epoch: int


CSV_COLUMNS = ("config_tag", "snr_db", "psnr_db", "ms_ssim", "loss", "latent_mse", "epoch")


def write_metrics_csv(records: list[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in CSV_COLUMNS])


# ----------------------------------------------------------------- training


def build_model(cfg: ExperimentConfig) -> VideoTransceiver:
    """Seed global torch RNG, then construct: (seed, config) fixes the init."""
    torch.manual_seed(cfg.train.seed)
    return VideoTransceiver(cfg)


def _gather_latents(result: SequenceResult) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    zs, zts = [], []
    for gop in result.gops:
        for rec in gop.records:
            zs.append(rec.z)
            zts.append(rec.z_tilde)
    return zs, zts


def _sequence_pass(
    model: VideoTransceiver,
    seq: torch.Tensor,
    snr: SnrContext,
    gen: torch.Generator,
    lam: float,
) -> tuple[torch.Tensor, SequenceResult]:
    result = model.transmit_sequence(seq, snr, gen)
    originals = seq[1 : 1 + result.frames_hat.shape[0]]
    zs, zts = _gather_latents(result)
    loss = joint_loss(originals, result.frames_hat, zs, zts, lam)
    return loss, result


def _gop_steps(
    model: VideoTransceiver,
    seq: torch.Tensor,
    gen: torch.Generator,
    lam: float,
    opt: torch.optim.Optimizer,
) -> float:
    """One optimizer step per GoP of the clip, chaining detached references.

    The clip's first frame bootstraps the reference chain inside the first
    GoP's graph; later GoPs reference the previous decoded key as a constant.
    Returns the worst (largest) step loss for divergence monitoring.
    """
    from .video_codec import GopBatch

    tcfg = model.cfg.train
    lo, hi = tcfg.snr_train_db
    n = model.cfg.data.gop_len
    n_gops = (seq.shape[0] - 1) // n
    prev_key: torch.Tensor | None = None
    worst = -math.inf
    for g in range(n_gops):
        snr_db = float(lo + (hi - lo) * torch.rand((), generator=gen))
        snr = SnrContext.from_snr(snr_db, model.cfg.ofdm.power)
        if prev_key is None:
            prev, _, _ = model.transmit_key(seq[0], model.draw_taps(gen), snr, gen)
        else:
            prev = prev_key
        gop = GopBatch(frames=seq[1 + g * n : 1 + (g + 1) * n], gop_index=g + 1)
        taps = [model.draw_taps(gen) for _ in range(n)]
        result = model.transmit_gop(gop, prev, taps, snr, gen)
        zs = [r.z for r in result.records]
        zts = [r.z_tilde for r in result.records]
        loss = joint_loss(gop.frames, result.frames_hat, zs, zts, lam)
        if not torch.isfinite(loss):
            raise _Divergence(float(loss))
        opt.zero_grad()
        loss.backward()
        # Deep fades can make the latent term explode; clip for stability.
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        worst = max(worst, float(loss.detach()))
        prev_key = result.frames_hat[-1].detach()
    return worst


class _Divergence(RuntimeError):
    def __init__(self, value: float):
        super().__init__(f"non-finite loss {value}")
        self.value = value


def _validate(
    model: VideoTransceiver,
    val_seqs: list[torch.Tensor],
    snr_db: float,
    seed: int,
    lam: float,
) -> tuple[float, float, float, float]:
    """Validation pass with frozen channel draws so epochs are comparable."""
    gen = torch.Generator().manual_seed(seed)
    snr = SnrContext.from_snr(snr_db, model.cfg.ofdm.power)
    losses, psnrs, ssims, lmses = [], [], [], []
    with torch.no_grad():
        for seq in val_seqs:
            loss, result = _sequence_pass(model, seq, snr, gen, lam)
            originals = seq[1 : 1 + result.frames_hat.shape[0]]
            losses.append(float(loss))
            psnrs.append(psnr(originals, result.frames_hat))
            ssims.append(ms_ssim(originals, result.frames_hat))
            lmses.append(latent_mse(*_gather_latents(result)))
    n = len(val_seqs)
    return sum(losses) / n, sum(psnrs) / n, sum(ssims) / n, sum(lmses) / n


def train(
    model: VideoTransceiver,
    train_seqs: list[torch.Tensor],
    val_seqs: list[torch.Tensor],
    out_dir: str | Path | None = None,
) -> list[MetricsRecord]:
    """Optimize jointly over the training clips; returns the per-epoch history
    and leaves the best-validation parameters loaded in the model."""
    tcfg = model.cfg.train
    lam = tcfg.lam if model.variant.use_denoiser else 0.0
    gen = torch.Generator().manual_seed(tcfg.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.init_lr)
    state = LrState(lr=tcfg.init_lr)
    lo, hi = tcfg.snr_train_db
    val_snr = 0.5 * (lo + hi)
    best_loss = math.inf
    best_params = None
    history: list[MetricsRecord] = []

    for epoch in range(1, tcfg.epochs_max + 1):
        model.train()
        for clip_idx, seq in enumerate(train_seqs):
            try:
                _gop_steps(model, seq, gen, lam, opt)
            except _Divergence as exc:
                if out_dir is not None:
                    dump = Path(out_dir) / "diverged_state.pt"
                    torch.save(model.state_dict(), dump)
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} clip {clip_idx}; aborting"
                ) from exc

        model.eval()
        val_loss, val_psnr, val_ssim, val_lmse = _validate(
            model, val_seqs, val_snr, tcfg.seed + 2, lam
        )
        improved = val_loss < best_loss
        if improved:
            best_loss = val_loss
            best_params = copy.deepcopy(model.state_dict())
        state = lr_step(state, improved, tcfg.lr_factor, tcfg.patience, tcfg.stop_patience)
        for group in opt.param_groups:
            group["lr"] = state.lr
        history.append(
            MetricsRecord(
                config_tag=model.cfg.variant,
                snr_db=val_snr,
                psnr_db=val_psnr,
                ms_ssim=val_ssim,
                loss=val_loss,
                latent_mse=val_lmse,
                epoch=epoch,
            )
        )
        logger.info(
            "[%s] epoch %d val_loss %.5f psnr %.2f lr %.2e%s",
            model.cfg.variant, epoch, val_loss, val_psnr, state.lr,
            " *" if improved else "",
        )
        if state.stop:
            logger.info("[%s] early stop after %d stalled epochs", model.cfg.variant, state.stall_epochs)
            break

    if best_params is not None:
        model.load_state_dict(best_params)
    return history


def evaluate(
    model: VideoTransceiver,
    seqs: list[torch.Tensor],
    snr_db: float,
    seed: int = 0,
) -> MetricsRecord:
    """Quality of a trained model at one SNR over a set of clips."""
    lam = model.cfg.train.lam if model.variant.use_denoiser else 0.0
    loss, psnr_db, ssim, lmse = _validate(model, seqs, snr_db, seed, lam)
    return MetricsRecord(
        config_tag=model.cfg.variant,
        snr_db=snr_db,
        psnr_db=psnr_db,
        ms_ssim=ssim,
        loss=loss,
        latent_mse=lmse,
        epoch=0,
    )


# ----------------------------------------------------------------- ablation


def run_ablation(
    checkpoints: dict[str, str | Path | VideoTransceiver],
    eval_snrs: list[float],
    eval_seqs: list[torch.Tensor],
    out_dir: str | Path,
    seed: int = 0,
) -> list[MetricsRecord]:
    """Evaluate trained configurations over an SNR grid; write CSV and plots.

    One CSV row per (configuration, SNR). Raises if any checkpoint path is
    missing, listing the absent configuration by name.
    """
    missing = [
        tag for tag, src in checkpoints.items()
        if not isinstance(src, VideoTransceiver) and not Path(src).exists()
    ]
    if missing:
        raise FileNotFoundError(f"missing checkpoints for configs: {', '.join(sorted(missing))}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[MetricsRecord] = []
    for tag, src in checkpoints.items():
        model = src if isinstance(src, VideoTransceiver) else load_checkpoint(src)
        model.eval()
        for snr_db in eval_snrs:
            rec = evaluate(model, eval_seqs, snr_db, seed=seed)
            rec.config_tag = tag
            records.append(rec)

    write_metrics_csv(records, out / "metrics.csv")
    _plot_metric(records, "psnr_db", "PSNR (dB)", out / "psnr.png")
    _plot_metric(records, "ms_ssim", "MS-SSIM", out / "ms_ssim.png")
    return records


def _plot_metric(records: list[MetricsRecord], attr: str, label: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    tags = sorted({r.config_tag for r in records})
    for tag in tags:
        rows = sorted((r for r in records if r.config_tag == tag), key=lambda r: r.snr_db)
        ax.plot([r.snr_db for r in rows], [getattr(r, attr) for r in rows], marker="o", label=tag)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(label)
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
