"""Command-line pipeline: generate -> train -> sample -> evaluate/measure -> report.

All verbs are deterministic given their inputs and seed, never mutate
their inputs, and write machine-readable outputs (JSON/CSV) before
plots. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import svgplot, synth, unet
from . import train as training
from .errors import ConfigError, DataError, RaterBayesError
from .heads import (MaskEnsemble, MeanFieldGaussianHead, SamplerConfig, binarize,
                    foreground_prob, sample_predictive)
from .metrics import dice_distribution, ged
from .synth import MultiRaterDataset, PhantomConfig, read_pbm, write_pbm
from .tensor import Tensor
from .train import TrainConfig
from .unet import UNetConfig
from .util import atomic_write_text

_SECTIONS = {"phantom": PhantomConfig, "unet": UNetConfig, "train": TrainConfig,
             "sampler": SamplerConfig}


def load_run_config(path) -> dict:
    """Parse and validate the JSON run configuration; unknown keys rejected."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config does not parse: {path}: {e}") from e
    unknown = set(raw) - set(_SECTIONS) - {"out_dir"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {}
    for section, cls in _SECTIONS.items():
        body = dict(raw.get(section, {}))
        allowed = {f.name for f in dc_fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        if section == "unet" and body.get("dropout_sites") is not None:
            body["dropout_sites"] = frozenset(body["dropout_sites"])
        cfg[section] = cls(**body)
    cfg["out_dir"] = raw.get("out_dir")
    return cfg


def _replace(dc, **kw):
    import dataclasses

    return dataclasses.replace(dc, **kw)


def _archive_config(out, cfg: dict):
    doc = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in cfg.items()
           if k in _SECTIONS}
    from dataclasses import asdict

    doc["sampler"] = asdict(cfg["sampler"])
    atomic_write_text(os.path.join(out, "run_config.json"), json.dumps(doc, indent=1, sort_keys=True))


# -- verbs ---------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    phantom = cfg["phantom"]
    if args.seed is not None:
        phantom = _replace(phantom, seed=args.seed)
    synth.generate(phantom, args.out)
    _archive_config(args.out, {**cfg, "phantom": phantom})
    print(f"generated {phantom.task} dataset "
          f"({phantom.n_train}/{phantom.n_val}/{phantom.n_test}) in {args.out}")
    return 0


def _num_classes_for(dataset: MultiRaterDataset, ucfg: UNetConfig) -> UNetConfig:
    if ucfg.num_classes != dataset.num_classes:
        ucfg = _replace(ucfg, num_classes=dataset.num_classes)
    return ucfg


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tcfg = cfg["train"]
    if args.scheme:
        tcfg = _replace(tcfg, scheme=args.scheme)
    if args.strategy:
        tcfg = _replace(tcfg, sampling_strategy=args.strategy)
    if args.seed is not None:
        tcfg = _replace(tcfg, seed=args.seed)
    tcfg = _replace(tcfg, ensemble_members=cfg["sampler"].ensemble_size)
    dataset = synth.load(os.path.join(args.dataset, "manifest.json"))
    ucfg = _num_classes_for(dataset, cfg["unet"])
    result = training.train(dataset, ucfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    for j, (model, head, hist) in enumerate(zip(result.models, result.heads, result.histories)):
        arrays = {k: v.data for k, v in model.params.items()}
        if head is not None:
            arrays.update(head.state_arrays())
        unet.save_checkpoint(os.path.join(args.out, f"member_{j:03d}.rbay"), ucfg, arrays,
                             extra_meta={"scheme": tcfg.scheme, "member": j})
        atomic_write_text(os.path.join(args.out, f"history_{j:03d}.json"),
                          json.dumps(hist.to_dict(), indent=1))
    _archive_config(args.out, {**cfg, "train": tcfg, "unet": ucfg})
    print(f"trained {tcfg.scheme} ({len(result.models)} model(s)) into {args.out}")
    return 0


def _load_members(ckpt_dir):
    names = sorted(n for n in os.listdir(ckpt_dir) if n.endswith(".rbay"))
    if not names:
        raise DataError(f"no checkpoints (*.rbay) in {ckpt_dir}")
    members = []
    scheme = None
    for n in names:
        config, arrays, extra = unet.load_checkpoint(os.path.join(ckpt_dir, n))
        scheme = extra.get("scheme", scheme)
        has_head = "head.weight" in arrays
        model = unet.build(config, np.random.default_rng(0), with_head=has_head)
        for k in model.params:
            model.params[k].data = arrays[k]
        head = MeanFieldGaussianHead.from_arrays(arrays) if "head.mu" in arrays else None
        members.append((model, head))
    if scheme is None:
        raise DataError(f"{ckpt_dir}: checkpoints carry no scheme metadata")
    return scheme, members


def cmd_sample(args) -> int:
    cfg = load_run_config(args.config)
    scfg = cfg["sampler"]
    if args.seed is not None:
        scfg = _replace(scfg, seed=args.seed)
    scheme, members = _load_members(args.checkpoints)
    dataset = synth.load(os.path.join(args.dataset, "manifest.json"))
    cases = dataset.split(args.split)
    if not cases:
        raise DataError(f"dataset split {args.split!r} is empty")
    thr = scfg.binarize_threshold
    index = {"scheme": scheme, "threshold": thr, "structures": list(dataset.structures),
             "split": args.split, "cases": {}}
    for ci, case in enumerate(cases):
        x = Tensor(case.image[None, None])
        rng = np.random.default_rng(np.random.SeedSequence((scfg.seed, ci)))
        if scheme == "deep_ensemble":
            models = [m for m, _ in members[:scfg.ensemble_size]]
            from .heads import ensemble_predict

            maps, _ = ensemble_predict(models, x, scfg)
        else:
            model, head = members[0]
            maps = sample_predictive(model, x, scfg, scheme, head=head, rng=rng)
        rec = {}
        for level, s in enumerate(dataset.structures, start=1):
            paths = []
            for t, pm in enumerate(maps):
                rel = f"{case.id}/{s}/sample_{t:03d}.pbm"
                write_pbm(os.path.join(args.out, rel), binarize(foreground_prob(pm, level), thr))
                paths.append(rel)
            rec[s] = paths
        index["cases"][case.id] = rec
    atomic_write_text(os.path.join(args.out, "index.json"), json.dumps(index, indent=1, sort_keys=True))
    print(f"wrote {len(cases)} mask ensembles ({scheme}) to {args.out}")
    return 0


def _load_sample_index(samples_dir):
    p = os.path.join(samples_dir, "index.json")
    if not os.path.exists(p):
        raise DataError(f"no index.json in {samples_dir}")
    with open(p) as f:
        return json.load(f)


def _sample_ensemble(samples_dir, index, case_id, structure) -> MaskEnsemble:
    rec = index["cases"].get(case_id)
    if rec is None or structure not in rec:
        raise DataError(f"samples missing for case {case_id} structure {structure}")
    masks = [read_pbm(os.path.join(samples_dir, rel)) for rel in rec[structure]]
    return MaskEnsemble(masks, source="predictive", image_id=case_id)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else 0.0)


def cmd_evaluate(args) -> int:
    index = _load_sample_index(args.samples)
    dataset = synth.load(os.path.join(args.dataset, "manifest.json"))
    cases = {c.id: c for c in dataset.cases}
    rows = []
    per_image = {}
    for cid in sorted(index["cases"]):
        case = cases.get(cid)
        if case is None:
            raise DataError(f"sampled case {cid} not present in dataset")
        img_rec = {}
        for s in dataset.structures:
            samples = _sample_ensemble(args.samples, index, cid, s)
            raters = MaskEnsemble([a[s] for a in case.annotations], source="raters", image_id=cid)
            rep = ged(samples, raters)
            d_pred = dice_distribution(samples, case.consensus[s])
            d_rat = dice_distribution(raters, case.consensus[s])
            rows.append([cid, s, f"{rep.ged:.10g}", f"{rep.d_cross:.10g}", f"{rep.d_pred:.10g}",
                         f"{rep.d_raters:.10g}", f"{d_pred.mean:.10g}", f"{d_pred.std:.10g}",
                         f"{d_rat.mean:.10g}", f"{d_rat.std:.10g}"])
            img_rec[s] = {"ged": rep.to_dict(), "dice_predictive": d_pred.to_dict(),
                          "dice_raters": d_rat.to_dict()}
        per_image[cid] = img_rec
    geds = [float(r[2]) for r in rows]
    gmean, gstd = _mean_std(geds)
    aggregate = {
        "scheme": index["scheme"],
        "ged_mean": gmean,
        "ged_std": gstd,
        "ged_formatted": f"{gmean:.3f} ±{gstd:.2f}",
        "dice_predictive_std_mean": _mean_std(
            [per_image[c][s]["dice_predictive"]["std"] for c in per_image for s in per_image[c]])[0],
        "dice_raters_std_mean": _mean_std(
            [per_image[c][s]["dice_raters"]["std"] for c in per_image for s in per_image[c]])[0],
    }
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "evaluation.csv"), _csv_text(
        ["image", "structure", "ged", "d_cross", "d_pred", "d_raters",
         "dice_pred_mean", "dice_pred_std", "dice_raters_mean", "dice_raters_std"], rows))
    atomic_write_text(os.path.join(args.out, "evaluation.json"), json.dumps(
        {"aggregate": aggregate, "per_image": per_image}, indent=1, sort_keys=True))
    print(f"evaluate [{index['scheme']}]: GED {aggregate['ged_formatted']} over {len(per_image)} images")
    return 0


def cmd_measure(args) -> int:
    from .clinical import VesselMaskPair, measure_ensemble

    index = _load_sample_index(args.samples)
    dataset = synth.load(os.path.join(args.dataset, "manifest.json"))
    if "lumen" not in dataset.structures or "eem" not in dataset.structures:
        raise ConfigError("measure requires a vessel dataset with lumen and eem structures")
    cases = {c.id: c for c in dataset.cases}
    rows = []
    per_image = {}
    for cid in sorted(index["cases"]):
        case = cases.get(cid)
        if case is None:
            raise DataError(f"sampled case {cid} not present in dataset")
        lum = _sample_ensemble(args.samples, index, cid, "lumen")
        eem = _sample_ensemble(args.samples, index, cid, "eem")
        pred = measure_ensemble([VesselMaskPair(l, e) for l, e in zip(lum.masks, eem.masks)])
        rat = measure_ensemble([VesselMaskPair(a["lumen"], a["eem"]) for a in case.annotations])
        per_image[cid] = {"predictive": pred.to_dict(), "raters": rat.to_dict()}
        for src, m in (("predictive", pred), ("raters", rat)):
            for q in ("lumen", "eem", "plaque_burden"):
                st = getattr(m, q)
                rows.append([cid, src, q, f"{st.mean:.10g}", f"{st.std:.10g}", m.n, m.clipped_pixels])
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "measurements.csv"), _csv_text(
        ["image", "source", "quantity", "mean", "std", "n", "clipped_pixels"], rows))
    atomic_write_text(os.path.join(args.out, "measurements.json"),
                      json.dumps(per_image, indent=1, sort_keys=True))
    print(f"measure: wrote clinical measurements for {len(per_image)} images to {args.out}")
    return 0


def cmd_report(args) -> int:
    dice_groups = {}
    rater_vals = None
    for ev in args.evaluate:
        with open(os.path.join(ev, "evaluation.json")) as f:
            doc = json.load(f)
        scheme = doc["aggregate"]["scheme"]
        vals = [v for img in doc["per_image"].values() for s in img.values()
                for v in s["dice_predictive"]["values"]]
        dice_groups[scheme] = vals
        if rater_vals is None:
            rater_vals = [v for img in doc["per_image"].values() for s in img.values()
                          for v in s["dice_raters"]["values"]]
    if rater_vals:
        dice_groups["raters"] = rater_vals
    os.makedirs(args.out, exist_ok=True)
    svgplot.boxplot_svg(os.path.join(args.out, "dice_vs_consensus.svg"), dice_groups,
                        "Dice vs consensus: predictive samples and raters", ylabel="Dice")
    if args.measure:
        with open(os.path.join(args.measure, "measurements.json")) as f:
            meas = json.load(f)
        for q in ("lumen", "eem", "plaque_burden"):
            series = {
                "predictive": [img["predictive"][q]["std"] for img in meas.values()],
                "raters": [img["raters"][q]["std"] for img in meas.values()],
            }
            svgplot.histogram_svg(os.path.join(args.out, f"std_{q}.svg"), series,
                                  f"Per-image std of {q}", xlabel=f"{q} std")
    print(f"report: wrote plots to {args.out}")
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raterbayes",
                                description="Bayesian segmentation vs rater variability pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed override")

    sp = sub.add_parser("generate", help="write a synthetic multi-rater dataset")
    common(sp)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="train one scheme on a dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--scheme", choices=("neural_linear", "mc_dropout", "deep_ensemble"))
    sp.add_argument("--strategy", help="per_expert:N | all_experts | consensus")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="draw predictive mask ensembles from checkpoints")
    common(sp)
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("evaluate", help="GED and Dice distributions for sampled masks")
    common(sp, config=False)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("measure", help="clinical measurement distributions")
    common(sp, config=False)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(fn=cmd_measure)

    sp = sub.add_parser("report", help="SVG plots from evaluate/measure outputs")
    common(sp, config=False)
    sp.add_argument("--evaluate", nargs="+", required=True,
                    help="one or more evaluate output directories")
    sp.add_argument("--measure", default=None, help="measure output directory")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except RaterBayesError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
