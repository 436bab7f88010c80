"""``glico`` command line: splits, GLICO training, sampling, classifiers, ablations.

Every command takes ``--seed`` (master seed) and ``--cpu``.  Experiment
settings come from an optional JSON/YAML file shaped like
:class:`~glico.evaluation.RunConfig`, plus ``--set key.path=value``
overrides (values parsed as JSON, falling back to plain strings).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import rng as rngs
from .config import config_hash, from_dict, load_config_file
from .data import load_dataset, make_split, save_split
from .errors import GlicoError
from .evaluation import (
    RunConfig,
    RunResult,
    ablation_runner,
    append_result,
    build_table,
    evaluate_classifier,
    fid_score,
    load_experiment_data,
    plot_accuracy_curves,
    read_results,
    resolve_device,
    run_experiment,
    save_run_outputs,
    train_downstream_classifier,
    train_glico_for_split,
)
from .generative_core import build_classifier
from .sampler import AugmentationPolicy, Synthesizer
from .trainer import load_checkpoint, save_checkpoint

log = logging.getLogger("glico")


# ------------------------------------------------------------------ helpers


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> RunConfig:
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise GlicoError(f"--set expects key=value, got {item!r}")
        _set_path(data, key.strip(), _parse_value(val))
    if getattr(args, "transductive", False):
        _set_path(data, "glico.transductive", True)
    if getattr(args, "split", None):
        _set_path(data, "data.split_file", str(args.split))
    if args.cpu:
        data["device"] = "cpu"
    if getattr(args, "out", None):
        data["output_dir"] = str(args.out)
    cfg = from_dict(RunConfig, data)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_grid(images: torch.Tensor, path: Path, nrow: int) -> None:
    import torchvision.utils as vutils

    path.parent.mkdir(parents=True, exist_ok=True)
    vutils.save_image(images * 0.5 + 0.5, str(path), nrow=max(1, nrow), padding=2)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".provenance.jsonl")


def _write_provenance(path: Path, records: list[dict]) -> None:
    with open(_sidecar(path), "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _indices(text: str | None, labels, n: int, rng) -> list[int]:
    if text:
        return [int(i) for i in text.split(",")]
    pool = np.flatnonzero(np.asarray(labels) >= 0)
    return [int(i) for i in rng.choice(pool, size=min(n, len(pool)), replace=n > len(pool))]


# ----------------------------------------------------------------- commands


def cmd_split(args) -> int:
    manifest = load_dataset(args.dataset, "train")
    split = make_split(manifest, args.spc, args.seed or 0)
    save_split(split, args.out)
    print(f"{split.dataset_id}: {len(split.train_indices)} indices, checksum {split.checksum[:12]}")
    for c, k in sorted(split.class_histogram.items()):
        print(f"  class {c}: {k}")
    return 0


def cmd_train_glico(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    train, test, split = load_experiment_data(cfg)
    unlabeled = load_dataset(args.unlabeled, "test") if args.unlabeled else None
    device = resolve_device(cfg.device)
    save_run_outputs(out, cfg, {"train": train.content_hash(), "test": test.content_hash(),
                                "split": split.checksum,
                                **({"unlabeled": unlabeled.content_hash()} if unlabeled else {})})
    save_split(split, out / "split.json")

    def progress(t):
        h = [r for r in t.history if r["epoch"] == t.epoch - 1]
        if h:
            log.info("epoch %d  percep %.4f", t.epoch, np.mean([r["percep"] for r in h]))

    state = train_glico_for_split(cfg, train, test, split, device, checkpoint_dir=out / "checkpoints",
                                  unlabeled=unlabeled, progress=progress)
    save_checkpoint(state, out / "final.ckpt")
    state.write_history(out / "history.jsonl")
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "steps": state.step, "final_percep": last.get("percep"),
                      "checkpoint": str(out / "final.ckpt")}))
    return 0


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    synth = Synthesizer(state)
    rng = rngs.numpy_stream(args.seed or 0, "cli_sample")
    idx = _indices(args.indices, state.codebook.labels, args.n, rng)
    policy = AugmentationPolicy(interp=args.interp)
    images, prov = synth.sample_many(idx, policy, rng)
    _save_grid(images, args.out, args.nrow)
    _write_provenance(args.out, [p.as_dict() for p in prov])
    print(f"wrote {len(images)} samples to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    state = load_checkpoint(args.checkpoint)
    idx = _indices(args.indices, state.codebook.labels, args.n,
                   rngs.numpy_stream(args.seed or 0, "cli_reconstruct"))
    images = Synthesizer(state).reconstruct_many(idx)
    _save_grid(images, args.out, args.nrow)
    _write_provenance(args.out, [{"source": i, "partner": i, "t": 0.0, "seed": None,
                                  "label": int(state.codebook.labels[i])} for i in idx])
    print(f"wrote {len(images)} reconstructions to {args.out}")
    return 0


def cmd_strip(args) -> int:
    state = load_checkpoint(args.checkpoint)
    frames = Synthesizer(state).interpolation_strip(args.i, args.j, args.steps, args.interp)
    _save_grid(frames, args.out, len(frames))
    ts = np.linspace(0, 1, args.steps + 2)
    _write_provenance(args.out, [{"source": args.i, "partner": args.j, "t": float(t), "seed": None,
                                  "label": int(state.codebook.labels[args.i])} for t in ts])
    print(f"wrote {len(frames)}-frame strip to {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    train, test, split = load_experiment_data(cfg)
    device = resolve_device(cfg.device)
    state = load_checkpoint(args.checkpoint, device=device) if args.checkpoint else None
    policy = cfg.augment if state is not None else None
    save_run_outputs(out, cfg, {"train": train.content_hash(), "test": test.content_hash(), "split": split.checksum})
    result, model = train_downstream_classifier(split, train, test, None, policy, state, cfg.classifier, device)
    result.config_hash = config_hash(cfg)
    c = cfg.classifier
    torch.save({"arch": c.arch, "width": c.width, "num_classes": train.num_classes,
                "in_channels": int(train.images.shape[1]), "dataset": cfg.data.test_dataset or cfg.data.dataset,
                "state_dict": model.state_dict()}, out / "classifier.pt")
    _write_json(out / "result.json", result.as_dict())
    print(json.dumps({"variant": result.variant, "top1": result.top1, "top5": result.top5}))
    return 0


def cmd_evaluate(args) -> int:
    blob = torch.load(args.classifier, map_location="cpu", weights_only=True)
    kwargs = {"width": blob["width"], "in_channels": blob["in_channels"]} if blob["arch"] == "small-cnn-4conv" else {}
    model = build_classifier(blob["arch"], blob["num_classes"], **kwargs)
    model.load_state_dict(blob["state_dict"])
    test = load_dataset(args.dataset or blob["dataset"], "test")
    top1, top5 = evaluate_classifier(model, test.tensor(), test.labels)
    print(json.dumps({"top1": top1, "top5": top5, "n": len(test)}))
    return 0


def _seed_list(text: str) -> list[int]:
    if "," in text:
        return [int(s) for s in text.split(",")]
    return list(range(int(text)))


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    variants = [v for v in args.variants.split(",") if v] if args.variants else []
    save_run_outputs(out, cfg)
    table = ablation_runner(cfg, variants, _seed_list(args.seeds), args.jobs, results_path=out / "results.jsonl")
    text = table.format()
    (out / "table.txt").write_text(text + "\n")
    _write_json(out / "table.json", table.rows)
    print(text)
    return 0


def cmd_compare(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    seeds = _seed_list(args.seeds)
    save_run_outputs(out, cfg)
    results = []
    for v in ("baseline", "glico"):
        for s in seeds:
            r = run_experiment(cfg, v, s)
            append_result(out / "results.jsonl", r.as_dict())
            results.append(r)
    table = build_table(results, ["baseline", "glico"])
    means = {row["variant"]: row["top1_mean"] for row in table.rows}
    record = {
        "seeds": seeds,
        "baseline_top1": [r.top1 for r in results if r.variant == "baseline"],
        "glico_top1": [r.top1 for r in results if r.variant == "glico"],
        "baseline_mean": means["baseline"],
        "glico_mean": means["glico"],
        "delta": means["glico"] - means["baseline"],
        "glico_better": means["glico"] > means["baseline"],
        "split_checksum": results[0].split_checksum,
    }
    _write_json(out / "delta.json", record)
    print(table.format())
    print(json.dumps(record))
    return 0


def cmd_fid(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = build_config(args)
    train, _, split = load_experiment_data(cfg)
    if state.meta.get("split_checksum") not in (None, split.checksum):
        raise GlicoError("checkpoint was trained on a different split")
    real = train.tensor(split.train_indices)
    synth = Synthesizer(state)
    rng = rngs.numpy_stream(args.seed or 0, "cli_fid")
    idx = rng.choice(np.flatnonzero(state.codebook.labels >= 0), args.n)
    glico_imgs, _ = synth.sample_many(idx, AugmentationPolicy(), rng)
    random_imgs = synth.random_latent_samples(args.n, rng)
    feat = state.extractor.pooled_features
    report = {"glico": dataclasses.asdict(fid_score(real, glico_imgs, feat)),
              "random_latent": dataclasses.asdict(fid_score(real, random_imgs, feat))}
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps(report))
    return 0


def cmd_report(args) -> int:
    records = read_results(args.results)
    variants = list(dict.fromkeys(r["variant"] for r in records))
    fields = {f.name for f in dataclasses.fields(RunResult)}
    table = build_table([RunResult(**{k: v for k, v in r.items() if k in fields}) for r in records], variants)
    print(table.format())
    if args.plot:
        plot_accuracy_curves(records, args.plot)
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--cpu", action="store_true", help="force CPU even if a GPU is present")
    common.add_argument("-v", "--verbose", action="store_true")

    cfgp = argparse.ArgumentParser(add_help=False)
    cfgp.add_argument("--config", type=Path, help="JSON/YAML run config")
    cfgp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")

    p = argparse.ArgumentParser(prog="glico", description="GLICO small-sample augmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", parents=[common], help="write a small-sample split manifest")
    s.add_argument("--dataset", default="digits32")
    s.add_argument("--spc", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-glico", parents=[common, cfgp], help="fit codes, generator and classifier")
    s.add_argument("--split", type=Path)
    s.add_argument("--transductive", action="store_true")
    s.add_argument("--unlabeled", help="unlabeled image source (defaults to the test set)")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_glico)

    for name, func, hlp in (("sample", cmd_sample, "class-conditional samples"),
                            ("reconstruct", cmd_reconstruct, "zero-noise reconstructions")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--checkpoint", type=Path, required=True)
        s.add_argument("--n", type=int, default=16)
        s.add_argument("--indices", help="comma-separated codebook indices")
        s.add_argument("--nrow", type=int, default=8)
        s.add_argument("--out", type=Path, required=True)
        if name == "sample":
            s.add_argument("--interp", choices=("slerp", "lerp"), default="slerp")
        s.set_defaults(func=func)

    s = sub.add_parser("strip", parents=[common], help="interpolation strip between two codes")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--i", type=int, required=True)
    s.add_argument("--j", type=int, required=True)
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--interp", choices=("slerp", "lerp"), default="slerp")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_strip)

    s = sub.add_parser("train-classifier", parents=[common, cfgp], help="downstream classifier")
    s.add_argument("--split", type=Path)
    s.add_argument("--checkpoint", type=Path, help="GLICO state; enables augmentation")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("evaluate", parents=[common], help="top-1/top-5 of a saved classifier")
    s.add_argument("--classifier", type=Path, required=True)
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common, cfgp], help="variant x seed matrix")
    s.add_argument("--variants", default="", help="comma-separated variant ids")
    s.add_argument("--seeds", default="3", help="count, or comma-separated list")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("compare", parents=[common, cfgp], help="baseline vs GLICO delta record")
    s.add_argument("--seeds", default="3")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("fid", parents=[common, cfgp], help="FID of GLICO vs random-code samples")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--split", type=Path)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("report", parents=[common], help="table and accuracy-vs-SPC plot from results")
    s.add_argument("--results", type=Path, required=True)
    s.add_argument("--plot", type=Path)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GlicoError, FileNotFoundError) as exc:
        print(f"glico {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
