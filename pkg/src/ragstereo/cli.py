"""Command-line entry point: ``ragstereo <command> ...``.

Any ``--section.key value`` flag not listed for a command overrides the
matching config field (for example ``--search.trials 10``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config


def _overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise ValueError(f"unrecognised argument {flag!r}")
        key = flag[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ValueError(f"missing value for {flag}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _config(args, extra):
    overrides = _overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _emit(doc):
    print(json.dumps(doc, indent=2))


def _load_image(path) -> np.ndarray:
    from PIL import Image
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def cmd_gen_scenes(args, extra):
    from .scenes import generate_scene
    cfg = _config(args, extra)
    out = Path(args.out)
    written = []
    for spec in cfg.scenes:
        ds = generate_scene(spec)
        ds.save(out / spec.name)
        written.append({"scene": spec.name, "pairs": len(ds), "fingerprint": ds.fingerprint()})
    _emit({"scenes": written})


def cmd_search(args, extra):
    from .harness import _split_for_search, topology_of
    from .scenes import SceneDataset
    from .search import TraceWriter, run_cell_search
    cfg = _config(args, extra)
    ds = SceneDataset.load(args.scene)
    s_train, s_val = _split_for_search(ds.train_split(), cfg.search.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "search_trace.jsonl"
    trace_path.unlink(missing_ok=True)
    gf, gm, _, _ = run_cell_search(s_train, s_val, topology_of(cfg), cfg.search.trials,
                                   cfg.search.epochs_per_trial, seed=args.seed or 0,
                                   trace=TraceWriter(trace_path))
    doc = {"feature": gf.to_dict(), "matching": gm.to_dict()}
    (out / "genotypes.json").write_text(json.dumps(doc, indent=2))
    _emit({"feature": gf.choices(), "matching": gm.choices(), "trace": str(trace_path)})


def _stream_and_state(args, cfg):
    from .checkpoint import load_checkpoint
    from .harness import TaskStream, new_state
    state = load_checkpoint(args.checkpoint) if args.checkpoint else new_state(cfg.validate())
    return TaskStream(state.config.scenes, state.config.regime.source_seed_offset), state


def cmd_grow(args, extra):
    """Search and grow the next task without training or saving (dry run)."""
    from .growth import run_growth
    from .harness import _GROWTH, _labelled_data, _search, derive_seed
    cfg = _config(args, extra)
    stream, state = _stream_and_state(args, cfg)
    cfg, task = state.config, state.completed + 1
    if task > len(cfg.scenes):
        raise ValueError("every scene in the config has already been learned")
    stream.begin_step(task)
    labelled, _ = _labelled_data(cfg, stream, task)
    gf, gm, supernet, _, (s_train, s_val) = _search(cfg, state.topology, labelled, task, cfg.seed)
    new = {j: (gf if state.topology.family_of(j) == "feature" else gm, c)
           for j, c in enumerate(supernet.extract(gf, gm))}
    path, _ = run_growth(s_train, s_val, state.ledger, task, new, state.cells, supernet.head,
                         trials=cfg.growth.trials, gamma=cfg.growth.gamma, c0=cfg.c0,
                         target_fraction=cfg.target_fraction, scorer=cfg.growth.scorer,
                         seed=derive_seed(cfg.seed, task, _GROWTH))
    owners = [state.ledger.cells[c].owner for c in path]
    _emit({"task": task, "path": path, "owners": owners,
           "reused_layers": sum(o < task for o in owners)})


def cmd_train(args, extra):
    """Learn the next task of the config and write a checkpoint."""
    from .checkpoint import save_checkpoint
    from .harness import learn_task
    cfg = _config(args, extra)
    stream, state = _stream_and_state(args, cfg)
    task = state.completed + 1
    if task > len(state.config.scenes):
        raise ValueError("every scene in the config has already been learned")
    learn_task(state, stream, task)
    save_checkpoint(state, args.out)
    _emit({"task": task, "checkpoint": str(args.out),
           "errors": [r for r in state.errors.to_rows() if r["model_task"] == task]})


def cmd_route(args, extra):
    from .router import RouterBank, route
    from .checkpoint import load_checkpoint
    bank = (load_checkpoint(args.checkpoint).router if args.checkpoint
            else RouterBank.load(args.router))
    image = _load_image(args.image)
    errors = bank.errors(image)
    _emit({"task": route(image, bank), "errors": [float(e) for e in errors]})


def cmd_eval(args, extra):
    from .checkpoint import load_checkpoint
    from .dispio import write_pfm
    from .scenes import SceneDataset
    from .training import predict, score_predictions
    state = load_checkpoint(args.checkpoint)
    split = SceneDataset.load(args.scene).test_split()
    pred = predict(state.model_for(args.task), split)
    e, d = score_predictions(pred, split, state.topology.max_disparity)
    if args.pfm_out:
        out = Path(args.pfm_out)
        out.mkdir(parents=True, exist_ok=True)
        for k, p in enumerate(pred):
            write_pfm(out / f"{k:04d}.pfm", p)
    _emit({"task": args.task, "epe": e, "d1": d, "pairs": len(pred)})


def _write_run(report, out: Path, predictions: dict | None, final_task: int | None):
    from .dispio import write_pfm
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "errors.csv").write_text(report.errors.to_csv())
    if predictions:
        for (t, i), pred in predictions.items():
            if t != final_task:
                continue
            d = out / "predictions" / f"task_{i}"
            d.mkdir(parents=True, exist_ok=True)
            for k, p in enumerate(pred):
                write_pfm(d / f"{k:04d}.pfm", p)


def cmd_run(args, extra):
    from .harness import run_continual, run_finetune_baseline
    cfg = _config(args, extra)
    out = Path(args.out)
    if args.baseline:
        report = run_finetune_baseline(cfg)
        _write_run(report, out, None, None)
    else:
        report, state = run_continual(cfg, checkpoint_dir=args.checkpoint_dir,
                                      resume_from=args.resume)
        _write_run(report, out, state.predictions, state.completed)
        (out / "growth.dot").write_text(_dot(state.ledger))
    _emit(_summary(report))


def _dot(ledger):
    from .growth import growth_dot
    return growth_dot(ledger)


def _summary(report) -> dict:
    d = report.to_dict()
    return {k: d[k] for k in ("kind", "regime", "seed", "fae", "bwt", "arr",
                              "routing_accuracy", "wall_clock")}


def cmd_report(args, extra):
    from .harness import RunReport
    if args.checkpoint:
        from .checkpoint import load_checkpoint
        ledger = load_checkpoint(args.checkpoint).ledger
        print(_dot(ledger))
        return
    if args.dot:
        dot_path = Path(args.run) / "growth.dot"
        if not dot_path.exists():
            raise FileNotFoundError(f"{dot_path} not found (baseline runs have no growth graph)")
        print(dot_path.read_text(), end="")
        return
    report = RunReport.from_dict(json.loads((Path(args.run) / "report.json").read_text()))
    doc = _summary(report)
    doc["errors"] = report.errors.to_rows()
    _emit(doc)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}),
              file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ragstereo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, config=True, seed=False, seed_required=False):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        if config:
            sp.add_argument("--config", help="TOML run configuration")
        if seed:
            sp.add_argument("--seed", type=int, required=seed_required)
        return sp

    sp = add("gen-scenes", cmd_gen_scenes)
    sp.add_argument("--out", required=True)
    sp = add("search", cmd_search, seed=True)
    sp.add_argument("--scene", required=True, help="scene directory written by gen-scenes")
    sp.add_argument("--out", required=True)
    sp = add("grow", cmd_grow, seed=True)
    sp.add_argument("--checkpoint", help="state after the previous task")
    sp = add("train", cmd_train, seed=True)
    sp.add_argument("--checkpoint", help="state after the previous task")
    sp.add_argument("--out", required=True, help="checkpoint directory to write")
    sp = add("route", cmd_route, config=False)
    sp.add_argument("--image", required=True)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--router", help="router bank directory")
    sp = add("eval", cmd_eval, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--pfm-out")
    sp = add("run", cmd_run, seed=True, seed_required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--baseline", action="store_true", help="run the finetuning baseline")
    sp = add("report", cmd_report, config=False)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--run", help="output directory of `run`")
    group.add_argument("--checkpoint")
    sp.add_argument("--dot", action="store_true", help="also print the growth graph")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.fn(args, extra)
    except Exception as e:  # reported as a machine-readable record
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        component = getattr(e, "component", None)
        if component:
            record["component"] = component
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
