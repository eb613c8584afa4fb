"""Command-line entry points: train, eval, ablate, channel-probe, info."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import trainer as trainer_mod
from .channel import NoiseSpec, identity_taps, make_pdp, sample_taps
from .config import (
    VARIANTS,
    ExperimentConfig,
    load_config,
    save_config,
)
from .data import load_dataset, synthetic_dataset, trim_to_gops
from .ofdm import OfdmConfig, OfdmGrid, make_pilots, normalize_power, rx, tx, freq_response
from .trainer import build_model, evaluate, run_ablation, train, write_metrics_csv
from .video_codec import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "RVJSCC_SEED"


def _resolve_seed(cfg: ExperimentConfig, flag_seed: int | None) -> None:
    """Seed precedence: --seed flag, then RVJSCC_SEED, then the config value."""
    if flag_seed is not None:
        cfg.train.seed = flag_seed
    elif SEED_ENV_VAR in os.environ:
        cfg.train.seed = int(os.environ[SEED_ENV_VAR])


def _clip_tensors(cfg: ExperimentConfig, n_clips: int, seed: int) -> list[torch.Tensor]:
    data = cfg.data
    if data.source == "synthetic":
        # All splits share one texture family (keyed by the dataset seed);
        # splits differ in motion, which is what generalizes at this scale.
        clips = synthetic_dataset(
            n_clips, data.frames_per_clip, data.frame_size, seed, texture_seed=data.seed
        )
        return [trim_to_gops(c.frames, data.gop_len) for c in clips]
    clips = load_dataset(data.source, data.frame_size, data.gop_len)[:n_clips]
    return [trim_to_gops(c.frames, data.gop_len) for c in clips]


def _dataset_splits(cfg: ExperimentConfig) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    data = cfg.data
    train_seqs = _clip_tensors(cfg, data.train_clips, data.seed)
    val_seqs = _clip_tensors(cfg, data.val_clips, data.seed + 10_000)
    return train_seqs, val_seqs


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _resolve_seed(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.yaml")
    train_seqs, val_seqs = _dataset_splits(cfg)
    model = build_model(cfg)
    history = train(model, train_seqs, val_seqs, out_dir=out)
    save_checkpoint(model, out / "checkpoint.pt")
    write_metrics_csv(history, out / "metrics.csv")
    logger.info("wrote %s", out / "checkpoint.pt")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    _resolve_seed(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.yaml")
    eval_seqs = _clip_tensors(cfg, cfg.data.val_clips, cfg.data.seed + 20_000)
    snrs = [float(s) for s in args.snrs.split(",")]
    records = [evaluate(model, eval_seqs, snr, seed=cfg.train.seed) for snr in snrs]
    write_metrics_csv(records, out / "metrics.csv")
    for rec in records:
        print(f"{rec.config_tag} @ {rec.snr_db:g} dB: PSNR {rec.psnr_db:.2f} dB, MS-SSIM {rec.ms_ssim:.4f}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args.config)
    _resolve_seed(base, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(base, out / "config_resolved.yaml")
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    train_seqs, val_seqs = _dataset_splits(base)
    eval_seqs = _clip_tensors(base, base.data.val_clips, base.data.seed + 20_000)
    snrs = [float(s) for s in args.snrs.split(",")]

    trained = {}
    for tag in variants:
        cfg = load_config(args.config)
        _resolve_seed(cfg, args.seed)
        cfg.variant = tag
        cfg.validate()
        model = build_model(cfg)
        logger.info("training variant %s", tag)
        history = train(model, train_seqs, val_seqs, out_dir=out)
        path = out / f"checkpoint_{tag}.pt"
        save_checkpoint(model, path)
        write_metrics_csv(history, out / f"history_{tag}.csv")
        trained[tag] = path

    records = run_ablation(trained, snrs, eval_seqs, out, seed=base.train.seed)
    for rec in records:
        print(f"{rec.config_tag} @ {rec.snr_db:g} dB: PSNR {rec.psnr_db:.2f} dB, MS-SSIM {rec.ms_ssim:.4f}")
    return 0


def _cmd_channel_probe(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _resolve_seed(cfg, args.seed)
    pdp = make_pdp(cfg.channel.num_paths, cfg.channel.gamma)
    print(f"power-delay profile (L={pdp.num_paths}, gamma={pdp.gamma:g}):")
    for l, v in enumerate(pdp.variances):
        print(f"  tap {l}: variance {v:.6f}")
    print(f"sum(variances) = {pdp.variances.sum():.6f}")

    gen = torch.Generator().manual_seed(cfg.train.seed)
    draws = 20_000
    emp = torch.zeros(pdp.num_paths, dtype=torch.float64)
    for _ in range(draws):
        emp += sample_taps(pdp, gen, dtype=torch.complex128).taps.abs().square()
    emp /= draws
    print(f"empirical tap variances over {draws} draws:")
    for l in range(pdp.num_paths):
        print(f"  tap {l}: {emp[l]:.6f} (expected {pdp.variances[l]:.6f})")

    ocfg = OfdmConfig(
        m=cfg.ofdm.m_key, n_p=cfg.ofdm.n_p, n_s=cfg.ofdm.n_s, n_c=cfg.ofdm.n_c,
        l_cp=cfg.ofdm.l_cp, power=cfg.ofdm.power, pilot_seed=cfg.ofdm.pilot_seed,
    )
    pilots = make_pilots(ocfg, dtype=torch.complex128)
    data = normalize_power(
        torch.randn(ocfg.m, ocfg.n_s, ocfg.n_c, generator=gen, dtype=torch.complex128),
        ocfg.power,
    )
    grid = OfdmGrid(pilots=pilots, data=data)
    clean = tx(grid, ocfg)
    _, rx_data = rx(clean, ocfg)
    print(f"tx/rx round-trip residual (identity channel): {(rx_data - data).abs().max():.3e}")

    taps = sample_taps(pdp, gen, dtype=torch.complex128)
    h = freq_response(taps, ocfg.n_c)
    faded = NoiseSpec(sigma2=0.0, snr_db=float("inf"))
    from .channel import apply_channel

    received = apply_channel(clean, taps, faded, gen)
    _, rx_faded = rx(received, ocfg)
    dev = (rx_faded - h[None, None, :] * data).abs().max()
    print(f"per-subcarrier model residual (L={pdp.num_paths} taps, zero noise): {dev:.3e}")
    return 0


def _cmd_info(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    counts = model.parameter_counts()
    print(f"variant: {model.cfg.variant} (preset {model.cfg.preset})")
    for name, count in counts.items():
        if name != "total":
            print(f"  {name}: {count:,} parameters")
    print(f"total: {counts['total']:,} parameters")
    print(f"latent symbols per frame (pre-padding): {model.k_raw}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rvjscc",
        description="Robust OFDM-based joint source-channel video transmission",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one variant from a config file or preset")
    p_train.add_argument("--config", required=True, help="YAML config path or preset name")
    p_train.add_argument("--out", default="rvjscc_run", help="output directory")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint over an SNR grid")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--snrs", default="0,5,10,15,20", help="comma-separated dB values")
    p_eval.add_argument("--out", default="rvjscc_eval")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_abl = sub.add_parser("ablate", help="train and compare system variants")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--variants", default=None, help="comma-separated subset of variants")
    p_abl.add_argument("--snrs", default="0,5,10,15,20")
    p_abl.add_argument("--out", default="rvjscc_ablation")
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.set_defaults(func=_cmd_ablate)

    p_probe = sub.add_parser("channel-probe", help="print channel/OFDM diagnostics")
    p_probe.add_argument("--config", required=True)
    p_probe.add_argument("--seed", type=int, default=None)
    p_probe.set_defaults(func=_cmd_channel_probe)

    p_info = sub.add_parser("info", help="print checkpoint parameter counts and config")
    p_info.add_argument("--checkpoint", required=True)
    p_info.set_defaults(func=_cmd_info)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
