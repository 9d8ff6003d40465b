"""
`nopeek` command line.

Exit codes: 0 success, 2 configuration error, 3 protocol / session error,
4 unreadable input file (dataset, checkpoint, pairs), 5 training failure
(attacker diverged, burn-in collapsed).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from tools import numcore as nc
from tools.attack import (
    AttackTrainingError,
    LeakedPairSet,
    PairFileError,
    dump_reconstructions,
    evaluate_attack,
    harvest_pairs,
    load_pairs,
    save_pairs,
    train_attacker,
)
from tools.burnin import DegenerateDataError, LinearAlgebraError, run_burnin, write_trace_csv
from tools.config import ConfigError, SessionConfig, configure_logging, load_config
from tools.datasets import DatasetFormatError, gen_synthetic, load_any, save_dataset
from tools.harness import (
    ExperimentReport,
    dump_activation_images,
    make_dataset,
    render_summary,
    report_rows,
    run_experiment,
    sweep_alpha,
)
from tools.model import CheckpointError, forward_client, load_checkpoint, save_checkpoint
from tools.nopeek_loss import AttributeConfigError
from tools.splitnet import ProtocolError, SessionAbortedError, build_session_model, run_client
from tools.transport import SocketTransport
from tools.wire import WireError

log = logging.getLogger("nopeek.cli")

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_INPUT = 4
EXIT_TRAINING = 5


def _config(args) -> SessionConfig:
    return load_config(args.config) if getattr(args, "config", None) else SessionConfig()


def _data(args, cfg: SessionConfig):
    if getattr(args, "data", None):
        return load_any(args.data)
    return make_dataset(cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.kind, args.n, args.seed)
    path = save_dataset(ds, args.out)
    print(f"wrote {ds.n} x {ds.X.shape[1]} {ds.name} dataset to {path}")
    return 0


def cmd_burnin(args) -> int:
    cfg = _config(args)
    ds = _data(args, cfg).standardized()
    head = cfg.heads[0]
    n = min(cfg.burnin_samples, ds.n)
    model = build_session_model(cfg, ds.X.shape[1], ds.image_shape,
                                {h: ds.labels[h].shape[1] for h in cfg.heads})
    X = ds.X[:n]
    mode = args.mode or (cfg.burnin_mode if cfg.burnin_mode != "off" else "ascent")
    result = run_burnin(X, ds.labels[head][:n], forward_client(model, X).value,
                        iters=args.iters or cfg.burnin_iters, mode=mode, beta=cfg.burnin_beta)
    path = write_trace_csv(result.trace, args.out)
    first, last = result.trace[0], result.trace[-1]
    print(f"burn-in ({mode}): f {first['f']:.4f} -> {last['f']:.4f}, "
          f"dcor(X,Z) {first['dcor_xz']:.4f} -> {last['dcor_xz']:.4f}; trace in {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, load_any(args.data) if args.data else None,
                            attack=not args.no_attack,
                            checkpoint=Path(args.out) / "model.npkm")
    csv_path, _ = report.write(args.out)
    print(f"report: {csv_path}")
    for key, value in report.summary.items():
        print(f"  {key:<22} {value:.4f}")
    return 0


def cmd_server(args) -> int:
    from server.main import serve

    cfg = _config(args)
    serve(cfg, port=args.port, sessions=args.sessions)
    return 0


def cmd_client(args) -> int:
    cfg = _config(args)
    host, _, port = args.addr.rpartition(":")
    ds = _data(args, cfg).standardized()
    with SocketTransport.connect(host or cfg.host, int(port)) as transport:
        out = run_client(cfg, ds, transport, resume=args.resume)
    out_dir = Path(args.out)
    save_checkpoint(out.model, out_dir / "client.npkm")
    report = ExperimentReport(rows=report_rows(out.epochs, cfg.heads),
                              config=cfg.model_dump(mode="json"), seed=cfg.seed)
    csv_path, _ = report.write(out_dir)
    print(f"session done: {len(out.epochs)} epochs, report {csv_path}")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    if args.pairs:
        Z, X = load_pairs(args.pairs)
        pairs = LeakedPairSet.from_arrays(Z, X, seed=cfg.seed, leak_fraction=cfg.leak_fraction)
        ds = None
    else:
        if not (args.checkpoint and args.data):
            raise ConfigError("attack needs --pairs, or --checkpoint with --data")
        ds = load_any(args.data).standardized()
        model = load_checkpoint(args.checkpoint)
        pairs = harvest_pairs(model, ds.X, seed=cfg.seed, leak_fraction=cfg.leak_fraction)
        if args.save_pairs:
            save_pairs(forward_client(model, ds.X).value, ds.X, args.save_pairs)
    dec = train_attacker(pairs, cfg.attack_epochs, cfg.attack_lr,
                         batch_size=cfg.attack_batch, seed=cfg.seed)
    report = evaluate_attack(dec, pairs)
    out_dir = Path(args.out)
    report.write_csv(out_dir / "attack.csv")
    report.write_json(out_dir / "attack.json")
    if args.dump_images and ds is not None and ds.image_shape:
        dump_reconstructions(dec, pairs, ds, out_dir / "recon")
    print(f"attacker: mean L2 {report.mean:.4f}, mse {report.mse:.5f} "
          f"({len(report.errors)} test pairs)")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    sweep = sweep_alpha(cfg, alphas, load_any(args.data) if args.data else None,
                        workers=args.workers, out_dir=args.out)
    print(sweep.to_csv(), end="")
    return 0


def cmd_dump_activations(args) -> int:
    cfg = _config(args)
    ds = _data(args, cfg)
    model = load_checkpoint(args.checkpoint)
    paths = dump_activation_images(model, ds, args.out, layer=args.layer, limit=args.limit)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_report(args) -> int:
    print(render_summary(args.paths))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nopeek", description="NoPeek split-learning toolkit")
    p.add_argument("--log", default=None, help="log level (default: NOPEEK_LOG or INFO)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset (.npz)")
    s.add_argument("--kind", choices=["blobs", "stripes-image"], default="blobs")
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("burnin", help="run device-level decorrelation and write its trace")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--mode", choices=["ascent", "mm"])
    s.add_argument("--iters", type=int)
    s.add_argument("--out", default="burnin_trace.csv")
    s.set_defaults(func=cmd_burnin)

    s = sub.add_parser("train", help="split training over loopback, then attack and report")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--no-attack", action="store_true")
    s.add_argument("--out", default="runs/train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("server", help="serve split-learning sessions over TCP")
    s.add_argument("--config")
    s.add_argument("--port", type=int)
    s.add_argument("--sessions", type=int, default=1)
    s.set_defaults(func=cmd_server)

    s = sub.add_parser("client", help="train against a running server")
    s.add_argument("--addr", required=True, help="host:port")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--resume", help="client checkpoint to resume from")
    s.add_argument("--out", default="runs/client")
    s.set_defaults(func=cmd_client)

    s = sub.add_parser("attack", help="train and score the reconstruction attacker")
    s.add_argument("--config")
    s.add_argument("--pairs", help="NPKP pair file")
    s.add_argument("--checkpoint", help="defended model (NPKM)")
    s.add_argument("--data", help="held-out data to harvest pairs from")
    s.add_argument("--save-pairs")
    s.add_argument("--dump-images", action="store_true")
    s.add_argument("--out", default="runs/attack")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="alpha1 sweep: the privacy-utility curve")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--alphas", default="0,0.1,0.5,1,2")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="runs/sweep")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("dump-activations", help="render client-layer activations as PPM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--layer", type=int)
    s.add_argument("--limit", type=int, default=16)
    s.add_argument("--out", default="runs/activations")
    s.set_defaults(func=cmd_dump_activations)

    s = sub.add_parser("report", help="summarize report JSON files")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log)
    try:
        return args.func(args)
    except (ConfigError, AttributeConfigError, ValidationError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (WireError, ProtocolError, SessionAbortedError) as e:
        if isinstance(e, SessionAbortedError) and e.checkpoint_path:
            log.error("session aborted; resume with --resume %s", e.checkpoint_path)
        log.error("protocol error: %s", e)
        return EXIT_PROTOCOL
    except nc.DimensionError as e:
        log.error("shape error: %s", e)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, PairFileError, FileNotFoundError) as e:
        log.error("unreadable input: %s", e)
        return EXIT_INPUT
    except (AttackTrainingError, DegenerateDataError, LinearAlgebraError) as e:
        log.error("training failed: %s", e)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
