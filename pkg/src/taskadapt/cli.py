"""Command-line entry point: ``taskadapt <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import archive, config as config_mod, manifest, persist
from .active import KINDS, compare_acquisition, iterations_to_reach
from .adaptation import AdaptationConfig, AdaptationNetworks
from .continual import StoreLearner, run_split_benchmark
from .data import LabeledImages, combo_dataset
from .engine import TaskAdaptiveClassifier, meta_train, pretrain_theta
from .episodes import fixed_episodes
from .evaluation import GradientBaseline, evaluate_episodes
from .tensor.random import make_rng

DATA_ENV = "TASKADAPT_DATA_DIR"
log = logging.getLogger("taskadapt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def default_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "runs"))


def _out(args) -> Path:
    out = Path(args.out) if args.out else default_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> config_mod.RunConfig:
    if not args.config:
        raise UsageError("--config is required for this command")
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _theta_path(args, out: Path) -> Path:
    return Path(args.theta) if getattr(args, "theta", None) else out / "theta.ckpt"


def _phi_path(args, out: Path, mode: str) -> Path:
    return Path(args.phi) if getattr(args, "phi", None) else out / f"phi-{mode}.ckpt"


def _model(args, cfg, out: Path) -> tuple[TaskAdaptiveClassifier, list]:
    theta = _theta_path(args, out)
    extractor = persist.load_extractor(theta, cfg.arch)
    phi = _phi_path(args, out, cfg.metatrain.mode)
    nets = persist.load_adaptation(phi, cfg.arch)
    return TaskAdaptiveClassifier(extractor, nets, cfg.metatrain.mode), [theta, phi]


def _family(cfg, name: str):
    for fam in cfg.tasks.build():
        if fam.name == name:
            return fam
    raise config_mod.ConfigError(f"unknown family {name!r} in config")


def _finish(out: Path, command: str, cfg, inputs, outputs) -> None:
    seed = cfg.seed if cfg is not None else 0
    conf = cfg.to_dict() if cfg is not None else {}
    path = manifest.write_manifest(out, command, conf, inputs, outputs, seed)
    print(f"wrote {', '.join(Path(p).name for p in outputs)} and {path.name} to {out}")


# -- commands ----------------------------------------------------------------

def cmd_init_config(args) -> None:
    config_mod.write_default(args.path, args.seed or 0)
    print(f"wrote default config to {args.path}")


def cmd_summary(args) -> None:
    cfg = _config(args)
    print(cfg.arch.summary())
    nets = AdaptationNetworks(cfg.arch, cfg.adaptation, cfg.seed)
    print(f"adaptation params {nets.num_parameters()}")


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = _out(args)
    d = cfg.pretrain_data
    outputs = []
    path = out / "pretrain.tad"
    archive.save(path, combo_dataset(d.n_colors, d.n_textures, d.per_class, cfg.tasks.style, cfg.seed))
    outputs.append(path)
    rng = make_rng(cfg.seed, "gen-data")
    for fam in cfg.tasks.build():
        for split in ("val", "test"):
            k = fam.num_classes(split)
            imgs = np.concatenate([fam.sample(rng, split, c, args.per_class) for c in range(k)])
            labels = np.repeat(np.arange(k), args.per_class)
            path = out / f"{fam.name}-{split}.tad"
            archive.save(path, LabeledImages(np.clip(imgs, 0.0, 1.0), labels, k))
            outputs.append(path)
    _finish(out, "gen-data", cfg, [], outputs)


def cmd_import_idx(args) -> None:
    out = _out(args)
    pixels, labels, k = archive.import_idx(args.images, args.labels)
    path = out / f"{args.name}.tad"
    path.write_bytes(archive.to_bytes(pixels, labels, k))
    n, h, w, c = pixels.shape
    print(f"imported {n} examples, {k} classes, {h}x{w}x{c}")
    _finish(out, "import-idx", None, [args.images, args.labels], [path])


def _pretrain_data(cfg) -> tuple[LabeledImages, list]:
    d = cfg.pretrain_data
    if d.archive:
        path = Path(d.archive)
        if not path.is_absolute() and not path.exists():
            path = default_dir() / path
        return archive.load(path), [path]
    return combo_dataset(d.n_colors, d.n_textures, d.per_class, cfg.tasks.style, cfg.seed), []


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    out = _out(args)
    data, inputs = _pretrain_data(cfg)

    def show(rec):
        print(f"epoch {rec['epoch']:3d}  lr {rec['lr']:.4g}  loss {rec['loss']:.4f}  acc {rec['accuracy']:.4f}")

    res = pretrain_theta(data, cfg.arch, cfg.pretrain, cfg.seed, callback=show)
    theta = out / "theta.ckpt"
    persist.save_extractor(theta, res.extractor, {"seed": cfg.seed}, res.opt)
    rec = out / "pretrain.json"
    manifest.write_json(rec, {"kind": "pretrain", "history": res.history})
    _finish(out, "pretrain", cfg, inputs, [theta, rec])


def cmd_metatrain(args) -> None:
    cfg = _config(args)
    out = _out(args)
    theta = _theta_path(args, out)
    extractor = persist.load_extractor(theta, cfg.arch)
    mode = cfg.metatrain.mode
    nets = AdaptationNetworks(cfg.arch, AdaptationConfig(**{**cfg.adaptation.to_dict(), "mode": mode}),
                              cfg.seed)

    def show(rec):
        if rec["step"] % 25 == 0:
            print(f"step {rec['step']:5d}  loss {rec['loss']:.4f}")

    res = meta_train(extractor, nets, cfg.tasks, cfg.metatrain, cfg.seed, callback=show)
    final = out / f"phi-{mode}.ckpt"
    best = out / f"phi-{mode}-best.ckpt"
    persist.save_adaptation(final, nets, extra={"seed": cfg.seed, "selection": "final"}, opt=res.opt)
    persist.save_adaptation(best, nets, res.best_state, extra={"seed": cfg.seed, "selection": "best",
                                                               "step": res.best_step})
    rec = out / f"metatrain-{mode}.json"
    manifest.write_json(rec, {"kind": "metatrain", "mode": mode, "history": res.history,
                              "validations": res.validations, "best_step": res.best_step})
    _finish(out, f"metatrain-{mode}", cfg, [theta], [final, best, rec])


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = _out(args)
    n = cfg.eval.episodes if args.episodes is None else args.episodes
    if n < 1:
        raise ValueError("evaluation needs at least one episode")
    eps = fixed_episodes(cfg.tasks, make_rng(cfg.seed, "evaluate", cfg.eval.split), n, cfg.eval.split)
    if args.baseline:
        theta = _theta_path(args, out)
        model, inputs, label = GradientBaseline(persist.load_extractor(theta, cfg.arch)), [theta], "baseline"
    else:
        model, inputs = _model(args, cfg, out)
        label = cfg.metatrain.mode
    report = evaluate_episodes(model.predict_episode, eps, label, workers=args.workers)
    print(report.table())
    path = out / f"eval-{label}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    _finish(out, f"eval-{label}", cfg, inputs, [path])


def cmd_continual(args) -> None:
    cfg = _config(args)
    out = _out(args)
    model, inputs = _model(args, cfg, out)
    c = cfg.continual
    res = run_split_benchmark(StoreLearner(model), _family(cfg, c.family), c.splits, c.shots, c.runs, c.targets,
                              c.split, cfg.seed)
    print("accumulated multi-head  " + " ".join(f"{a:.3f}" for a in res.accumulated_multi))
    print("accumulated single-head " + " ".join(f"{a:.3f}" for a in res.accumulated_single))
    print(f"non-continual upper bound {res.upper_bound:.3f}")
    path = out / "continual.json"
    manifest.write_json(path, {"kind": "continual", "result": res.to_dict()})
    _finish(out, "continual", cfg, inputs, [path])


def cmd_active(args) -> None:
    cfg = _config(args)
    out = _out(args)
    model, inputs = _model(args, cfg, out)
    a = cfg.active
    curves = compare_acquisition(model, _family(cfg, a.family), a.task, KINDS, a.seeds, a.iterations, a.k, cfg.seed)
    record = {"kind": "active", "target_accuracy": a.target_accuracy, "mean_curves": {}, "iterations_to_target": {}}
    for kind, c in curves.items():
        record["mean_curves"][kind] = c.mean(axis=0).tolist()
        its = [iterations_to_reach(row, a.target_accuracy) for row in c]
        record["iterations_to_target"][kind] = float(np.mean(its))
        print(f"{kind:<20s} mean iterations to {a.target_accuracy:.2f}: {np.mean(its):.2f}")
    path = out / "active.json"
    manifest.write_json(path, record)
    _finish(out, "active", cfg, inputs, [path])


def cmd_plot(args) -> None:
    from .plotting import plot_record

    out = _out(args)
    outputs = []
    for rec_path in args.records:
        record = json.loads(Path(rec_path).read_text(encoding="utf-8"))
        path = out / (Path(rec_path).stem + ".png")
        plot_record(record, path)
        outputs.append(path)
    _finish(out, "plot", None, args.records, outputs)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel evaluation workers (default 1)")
    common.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./runs)")

    p = _Parser(prog="taskadapt", description="Task-conditioned few-shot classifiers at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", parents=[common], help="write the default configuration")
    s.add_argument("path")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("summary", parents=[common], help="print the extractor layout and parameter counts")
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic dataset archives")
    s.add_argument("--per-class", type=int, default=20, help="images per held-out class")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("import-idx", parents=[common], help="convert an IDX image/label pair to an archive")
    s.add_argument("images")
    s.add_argument("labels")
    s.add_argument("--name", default="digits")
    s.set_defaults(func=cmd_import_idx)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the extractor")
    s.set_defaults(func=cmd_pretrain)

    for name, func, help_ in [("metatrain", cmd_metatrain, "meta-train the adaptation networks"),
                              ("eval", cmd_eval, "evaluate on held-out episodes"),
                              ("continual", cmd_continual, "run the split continual-learning benchmark"),
                              ("active", cmd_active, "compare acquisition functions")]:
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--theta", help="extractor checkpoint (default <out>/theta.ckpt)")
        if name != "metatrain":
            s.add_argument("--phi", help="adaptation checkpoint (default <out>/phi-<mode>.ckpt)")
        if name == "eval":
            s.add_argument("--episodes", type=int, default=None, help="episodes per family")
            s.add_argument("--baseline", action="store_true", help="evaluate the gradient baseline instead")
        s.set_defaults(func=func)

    s = sub.add_parser("plot", parents=[common], help="render record files to PNG line charts")
    s.add_argument("records", nargs="+")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"taskadapt: error: {exc}", file=sys.stderr)
        return 1
    except (archive.ArchiveError, persist.ArchMismatch, FloatingPointError, RuntimeError, ValueError,
            KeyError, OSError) as exc:
        print(f"taskadapt: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
