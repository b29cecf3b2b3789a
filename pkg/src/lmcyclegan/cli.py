"""``lmcg`` command line: synth, pretrain, train, translate, eval.

Exit codes: 0 ok, 1 other failure, 2 configuration, 3 data, 4 checkpoint or
phase order, 5 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RUN_DIR_ENV, RunConfig, echo_config, load_config, with_overrides
from .data import ManifestRecord, load_folder, split_holdout, to_uint8, write_image, write_manifest
from .errors import DataError, LMCGError
from .geometry import encode_heatmaps, make_unmatched_pair

log = logging.getLogger("lmcyclegan")

DIRECTIONS = {"XtoY": ("X", "Y"), "YtoX": ("Y", "X")}
HELP_WIDTH = 100


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=34)


class _Given(argparse.Action):
    """Mixin bookkeeping: remember which flags were typed, so config-file
    values are only overridden by explicit flags."""

    def _mark(self, namespace):
        given = getattr(namespace, "_given", None)
        if given is None:
            given = set()
            setattr(namespace, "_given", given)
        given.add(self.dest)


class _Store(argparse._StoreAction, _Given):
    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, values, option_string)
        self._mark(namespace)


class _StoreTrue(argparse._StoreTrueAction, _Given):
    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, values, option_string)
        self._mark(namespace)


def _register(p: argparse.ArgumentParser):
    p.register("action", None, _Store)
    p.register("action", "store", _Store)
    p.register("action", "store_true", _StoreTrue)
    return p


def _given(args, name: str):
    return getattr(args, name) if name in getattr(args, "_given", set()) else None


def _common(p, data_root: bool = True):
    p.add_argument("--config", metavar="TOML", default=None, help="run configuration file")
    p.add_argument("--run-dir", metavar="DIR", default=f"${RUN_DIR_ENV} or ./run",
                   help="run directory (config echo, logs, checkpoints, metrics)")
    if data_root:
        p.add_argument("--data-root", metavar="DIR", default="data", help="dataset root with X/ and Y/")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _register(argparse.ArgumentParser(
        prog="lmcg", formatter_class=_Formatter,
        description="Landmark-assisted CycleGAN training on a small CPU budget."))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        return _register(sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter))

    p = add("synth", "write a synthetic two-domain face dataset")
    p.add_argument("--config", metavar="TOML", default=None, help="run configuration file ([synth] section)")
    p.add_argument("--out", metavar="DIR", default="data", help="output dataset root")
    p.add_argument("--n-per-domain", type=int, default=400, help="images per domain")
    p.add_argument("--size", type=int, default=64, help="image side S (divisible by 32)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--force", action="store_true", default=False, help="write into a non-empty directory")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")

    p = add("pretrain", "pretrain the landmark regressors")
    _common(p)
    p.add_argument("--domain", choices=["X", "Y", "both"], default="both", help="which regressor(s)")
    p.add_argument("--iters", type=int, default=2000, help="iterations per regressor")
    p.add_argument("--size", type=int, default=64, help="image side S")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--resume", action="store_true", default=False, help="continue from the latest checkpoint")
    p.add_argument("--stop-after", type=int, metavar="N", default=None,
                   help="stop after N iterations, leaving a resumable checkpoint")

    p = add("train", "run Stage I, Stage II or both")
    _common(p)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both", help="stage(s) to run")
    p.add_argument("--iters-stage1", type=int, default=3000, help="Stage I iterations")
    p.add_argument("--iters-stage2", type=int, default=2000, help="Stage II iterations")
    p.add_argument("--size", type=int, default=64, help="image side S")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--lambda-local", type=float, default=0.3, help="local adversarial weight (Stage II)")
    p.add_argument("--gan-mode", choices=["bce", "lsgan"], default="bce", help="adversarial loss form")
    p.add_argument("--checkpoint-interval", type=int, default=500, help="iterations between resumable checkpoints")
    p.add_argument("--resume", action="store_true", default=False, help="continue from the latest checkpoints")
    p.add_argument("--stop-after", type=int, metavar="N", default=None,
                   help="stop the running stage after N iterations, leaving a resumable checkpoint")
    p.add_argument("--allow-config-mismatch", action="store_true", default=False,
                   help="load checkpoints whose config hash differs")

    p = add("translate", "map a folder of images through a trained generator")
    _common(p)
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="XtoY", help="translation direction")
    p.add_argument("--input", metavar="DIR", default="<data-root>/<source domain>",
                   help="folder with manifest.tsv and images")
    p.add_argument("--out", metavar="DIR", default="<run-dir>/translated/<direction>", help="output folder")
    p.add_argument("--subset", choices=["heldout", "all"], default="heldout", help="which input records")
    p.add_argument("--checkpoint", metavar="FILE", default="latest finished stage",
                   help="generator checkpoint")
    p.add_argument("--allow-config-mismatch", action="store_true", default=False,
                   help="load checkpoints whose config hash differs")

    p = add("eval", "compute metrics, figures and a sample mosaic")
    _common(p)
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="XtoY", help="evaluated direction")
    p.add_argument("--translated", metavar="DIR", default="<run-dir>/translated/<direction>",
                   help="folder written by translate")
    p.add_argument("--out", metavar="FILE", default="<run-dir>/metrics.tsv", help="metrics TSV")
    p.add_argument("--checkpoint", metavar="FILE", default="latest finished stage",
                   help="checkpoint for the discriminator probe")
    p.add_argument("--no-figures", action="store_true", default=False, help="skip figures and mosaic")
    p.add_argument("--allow-config-mismatch", action="store_true", default=False,
                   help="load checkpoints whose config hash differs")
    return parser


# ---------------------------------------------------------------- helpers

def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    train = {
        "size": _given(args, "size"),
        "seed": _given(args, "seed"),
        "iters_stage1": _given(args, "iters_stage1"),
        "iters_stage2": _given(args, "iters_stage2"),
        "iters_regressor": _given(args, "iters"),
        "gan_mode": _given(args, "gan_mode"),
        "checkpoint_interval": _given(args, "checkpoint_interval"),
        "data_root": _given(args, "data_root"),
    }
    weights = {"lambda_local": _given(args, "lambda_local")}
    return with_overrides(cfg, train=train, weights=weights, run_dir=_given(args, "run_dir"))


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from dataclasses import replace

    from .synth import write_synth_dataset

    cfg = load_config(args.config)
    upd = {k: v for k, v in (("size", _given(args, "size")), ("seed", _given(args, "seed"))) if v is not None}
    params = replace(cfg.synth, **upd)
    n = _given(args, "n_per_domain") or (cfg.n_per_domain if args.config else args.n_per_domain)
    if params.size % 32:
        from .errors import ConfigError

        raise ConfigError(f"--size must be divisible by 32 (landmark regressor constraint), got {params.size}")
    write_synth_dataset(args.out, n, params, force=args.force)
    print(f"wrote {2 * n} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .training import load_run_data, pretrain_regressor

    cfg = resolve_config(args)
    echo_config(cfg, cfg.run_dir)
    train, _ = load_run_data(cfg.train)
    domains = ["X", "Y"] if args.domain == "both" else [args.domain]
    for d in domains:
        ck = pretrain_regressor(cfg.train, d, cfg.run_dir, train, resume=args.resume, stop_at=args.stop_after)
        if ck is None:
            print(f"regressor {d}: stopped early, resume with --resume")
            return 0
        print(f"regressor {d}: done ({ck.iteration} iterations)")
    return 0


def cmd_train(args) -> int:
    from .training import load_run_data, train_stage1, train_stage2

    cfg = resolve_config(args)
    echo_config(cfg, cfg.run_dir)
    train, _ = load_run_data(cfg.train)
    allow = args.allow_config_mismatch
    if args.stage in ("1", "both"):
        ck = train_stage1(cfg.train, cfg.run_dir, train, resume=args.resume, stop_at=args.stop_after,
                          allow_hash_mismatch=allow)
        if ck is None:
            print("stage 1: stopped early, resume with --resume")
            return 0
        print(f"stage 1: done ({ck.iteration} iterations)")
    if args.stage in ("2", "both"):
        ck = train_stage2(cfg.train, cfg.run_dir, train, resume=args.resume, stop_at=args.stop_after,
                          allow_hash_mismatch=allow)
        if ck is None:
            print("stage 2: stopped early, resume with --resume")
            return 0
        print(f"stage 2: done ({ck.iteration} iterations)")
    return 0


def _input_dir(args, cfg, domain):
    return Path(args.input) if "input" in getattr(args, "_given", set()) else Path(cfg.data_root) / domain


def _out_dir(args, cfg, name, default):
    return Path(getattr(args, name)) if name in getattr(args, "_given", set()) else default


def _checkpoint_arg(args):
    return args.checkpoint if "checkpoint" in getattr(args, "_given", set()) else None


def cmd_translate(args) -> int:
    from .nets import generator_forward
    from .tensor import Tensor
    from .training import inference_bundle

    cfg = resolve_config(args)
    src, _ = DIRECTIONS[args.direction]
    in_dir = _input_dir(args, cfg, src)
    out_dir = _out_dir(args, cfg, "out", Path(cfg.run_dir) / "translated" / args.direction)
    S = cfg.train.size
    samples = load_folder(in_dir, S, src)
    if args.subset == "heldout":
        _, samples = split_holdout(samples, cfg.train.holdout, cfg.train.seed)
    if not samples:
        raise DataError(f"{in_dir}: nothing to translate")
    bundle = inference_bundle(cfg.train, cfg.run_dir, _checkpoint_arg(args),
                              allow_hash_mismatch=args.allow_config_mismatch)
    dir_code = "XY" if args.direction == "XtoY" else "YX"
    records = []
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        hm = encode_heatmaps(s.landmarks, S, cfg.train.heatmap_sigma)
        fake = generator_forward(bundle, dir_code, Tensor(s.image[None]), Tensor(hm[None]))
        rel = "images/" + Path(s.id).with_suffix(".ppm").name
        write_image(out_dir / rel, to_uint8(fake.data[0]))
        records.append(ManifestRecord(rel, s.landmarks))
    write_manifest(out_dir / "manifest.tsv", records)
    print(f"translated {len(records)} images into {out_dir}")
    return 0


def evaluate(cfg: RunConfig, direction: str, translated_dir, checkpoint=None, figures: bool = True,
             allow_hash_mismatch: bool = False) -> dict[str, float]:
    """Metrics for one translation direction; also writes figures under
    ``<run_dir>/figures`` when asked."""
    from .metrics import extract_features, frechet_distance, landmark_error
    from .nets import global_disc_forward
    from .report import plot_losses, plot_metrics, write_mosaic
    from .tensor import Tensor
    from .training import final_stage_checkpoint, inference_bundle, load_run_data

    src, tgt = DIRECTIONS[direction]
    tdir = Path(translated_dir)
    if not (tdir / "manifest.tsv").is_file():
        raise DataError(f"no translated images in {tdir} (run translate first)")
    S = cfg.train.size
    translated = load_folder(tdir, S, tgt)
    _, test = load_run_data(cfg.train)
    has_gan = checkpoint is not None or final_stage_checkpoint(cfg.run_dir) is not None
    bundle = inference_bundle(cfg.train, cfg.run_dir, checkpoint, need_generators=has_gan,
                              allow_hash_mismatch=allow_hash_mismatch)

    def imgs(samples):
        return np.stack([s.image for s in samples])

    def lms(samples):
        return np.stack([s.landmarks for s in samples])

    ref = extract_features(imgs(test[tgt]), bundle, tgt, f"real {tgt}")
    m: dict[str, float] = {}
    m["n_translated"] = len(translated)
    m["n_reference"] = len(test[tgt])
    m[f"fid_translated_{direction}"] = frechet_distance(extract_features(imgs(translated), bundle, tgt), ref)
    m[f"fid_source_{src}_vs_{tgt}"] = frechet_distance(extract_features(imgs(test[src]), bundle, tgt), ref)
    m[f"landmark_error_translated_{direction}_px"] = landmark_error(imgs(translated), lms(translated), bundle, tgt)
    for d in (src, tgt):
        m[f"regressor_error_{d}_heldout_px"] = landmark_error(imgs(test[d]), lms(test[d]), bundle, d)
    if has_gan:
        real, unm = [], []
        for i, s in enumerate(test[tgt]):
            hm = encode_heatmaps(s.landmarks, S, cfg.train.heatmap_sigma)
            rng = np.random.default_rng([cfg.train.seed, 0xE7A1, i])
            u = make_unmatched_pair(s.image, s.landmarks, rng, cfg.train.max_shift, cfg.train.heatmap_sigma)
            real.append(global_disc_forward(bundle, "conditional", tgt, Tensor(s.image[None]),
                                            Tensor(hm[None])).item())
            unm.append(global_disc_forward(bundle, "conditional", tgt, Tensor(u.image[None]),
                                           Tensor(u.heatmaps[None])).item())
        m[f"dgc_{tgt}_logit_matched"] = float(np.mean(real))
        m[f"dgc_{tgt}_logit_unmatched"] = float(np.mean(unm))

    if figures:
        fig_dir = Path(cfg.run_dir) / "figures"
        for log_file in sorted((Path(cfg.run_dir) / "logs").glob("*.tsv")):
            plot_losses(log_file, fig_dir / f"losses_{log_file.stem}.png", title=log_file.stem)
        plot_metrics(m, fig_dir / f"metrics_{direction}.png")
        by_name = {Path(s.id).stem: s for s in test[src]}
        pairs = [(by_name[Path(t.id).stem].image, t.image) for t in translated if Path(t.id).stem in by_name]
        if pairs:
            write_mosaic(fig_dir / f"mosaic_{direction}.ppm", pairs[:16])
    return m


def cmd_eval(args) -> int:
    from .report import format_metrics, write_metrics

    cfg = resolve_config(args)
    tdir = _out_dir(args, cfg, "translated", Path(cfg.run_dir) / "translated" / args.direction)
    out = _out_dir(args, cfg, "out", Path(cfg.run_dir) / "metrics.tsv")
    m = evaluate(cfg, args.direction, tdir, _checkpoint_arg(args), figures=not args.no_figures,
                 allow_hash_mismatch=args.allow_config_mismatch)
    write_metrics(out, m)
    sys.stdout.write(format_metrics(m))
    return 0


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "translate": cmd_translate,
            "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except LMCGError as e:
        print(f"lmcg {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
