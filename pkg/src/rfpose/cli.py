"""Command-line driver: calibrate / simulate / preprocess / train / eval /
ablate / perturb / export-features.

Every subcommand takes ``--config <json>`` for inputs and parameters,
``--out <dir>`` for outputs, and ``--seed`` to override the configured seed.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  Reports carry
their timestamp in a single leading comment line; the JSON body is
byte-stable for fixed seeds and configs.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

import numpy as np

from . import dataio, dataset, net, train
from .geometry import CameraModel, DistanceMeasurement, solve_pnp, unify_layout


def _load_config(path) -> dict:
    if path is None:
        raise ValueError("--config is required for this subcommand")
    return dataio.read_json(path)


def _resolve_seed(args, doc: dict, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    return int(doc.get("seed", default))


def _model_config(doc: dict) -> net.ModelConfig:
    section = dict(doc.get("model", {}))
    profile = section.pop("profile", "desk")
    base = net.paper_profile() if profile == "paper" else net.desk_profile()
    if "head_hidden" in section:
        section["head_hidden"] = tuple(section["head_hidden"])
    return base.with_overrides(**section) if section else base


def _train_config(doc: dict, seed: int) -> train.TrainConfig:
    section = dict(doc.get("train", {}))
    section.pop("seed", None)
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    return train.desk_train_profile().with_overrides(seed=seed, **section)


def _sim_config(doc: dict) -> dataset.SimConfig:
    section = dict(doc.get("sim", {}))
    profile = section.pop("profile", "default")
    base = dataset.tiny_sim_config() if profile == "tiny" else dataset.SimConfig()
    for key in ("layout_angles_deg", "rx_rig_angles_deg", "orientations_deg", "actions"):
        if key in section:
            section[key] = tuple(section[key])
    if "locations" in section:
        section["locations"] = tuple(tuple(p) for p in section["locations"])
    return base.with_overrides(**section) if section else base


def _split_spec(doc: dict, seed: int) -> train.SplitSpec:
    section = dict(doc.get("split", {"protocol": "cross_layout", "held_out": "L3"}))
    section.setdefault("seed", seed)
    return train.SplitSpec(**section)


def _load_split_samples(doc: dict, seed: int, t_seq: int):
    paths = doc.get("paths", {})
    index_path = os.path.join(paths["dataset"], "index.json")
    entries = dataio.read_index(index_path)
    spec = _split_spec(doc, seed)
    train_ids, test_ids = train.make_splits(entries, spec)
    features_dir = paths["features"]
    train_set = dataset.load_samples(index_path, features_dir, train_ids, t_seq=t_seq) if train_ids else None
    test_set = dataset.load_samples(index_path, features_dir, test_ids, t_seq=t_seq) if test_ids else None
    return train_set, test_set, spec


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_calibrate(args) -> int:
    doc = _load_config(args.config)
    intr = doc["intrinsics"]
    cam = CameraModel(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                      skew=intr.get("skew", 0.0),
                      distortion=tuple(intr.get("distortion", (0.0, 0.0, 0.0, 0.0))))
    base = os.path.dirname(os.fspath(args.config))
    pairs = []
    transforms = {}
    for i, pair in enumerate(doc["pairs"]):
        def corr(name):
            spec = pair[name]
            if isinstance(spec, str):
                spec = dataio.read_json(os.path.join(base, spec))
            return list(zip(spec["points"], spec["pixels"]))

        world = solve_pnp(corr("world_corr"), cam)
        aux = solve_pnp(corr("aux_corr"), cam)
        m = pair["measurement"]
        measurement = DistanceMeasurement(mode=m["mode"], value=m["value"],
                                          square_size=m.get("square_size"), scale=m.get("scale"))
        pairs.append((world.cam_from_board, aux.cam_from_board, measurement))
        transforms[f"pair{i}.cam_from_world"] = world.cam_from_board
        transforms[f"pair{i}.cam_from_aux"] = aux.cam_from_board
        print(f"pair {i}: world rms {world.reprojection_rms:.4f} px, aux rms {aux.reprojection_rms:.4f} px")
    layout = unify_layout(pairs)
    os.makedirs(args.out, exist_ok=True)
    record = dataio.CalibrationRecord(doc.get("layout_id", "L1"), layout, transforms)
    out_path = os.path.join(args.out, "calibration.json")
    dataio.write_calibration(out_path, record)
    print(f"wrote {out_path}: tx {np.round(layout.tx, 6).tolist()}, {layout.n_receivers} receiver(s)")
    return 0


def _cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    config = _sim_config(doc)
    os.makedirs(args.out, exist_ok=True)
    index_path = dataset.simulate_dataset(config, args.out, seed=seed)
    n = len(dataio.read_index(index_path))
    print(f"wrote {n} clips under {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    doc = _load_config(args.config)
    feature = doc.get("feature", {})
    index_path = os.path.join(doc["paths"]["dataset"], "index.json")
    manifest = dataset.preprocess_dataset(index_path, args.out,
                                          feature_size=int(feature.get("size", 32)),
                                          window=feature.get("window"), hop=feature.get("hop"))
    print(f"wrote feature cache manifest {manifest}")
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    model_config = _model_config(doc)
    train_config = _train_config(doc, seed)
    mode = doc.get("mode", "conditioned")
    train_set, test_set, spec = _load_split_samples(doc, seed, model_config.t_seq)
    if train_set is None:
        raise train.DataMissing("split produced no training clips")
    model = net.PoseRegressor(model_config, seed=seed)
    history, transform = train.train_loop(model, train_set, train_config, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    train.save_checkpoint(ckpt_path, model, transform, train_config, mode,
                          extra={"split": {"protocol": spec.protocol, "held_out": spec.held_out}})
    payload = {"history": history, "mode": mode, "seed": seed,
               "n_train_samples": train_set.n_samples}
    if test_set is not None:
        report = train.evaluate(model, test_set, transform, mode=mode)
        payload["eval"] = report.to_dict()
        print(f"test MPJPE {report.mpjpe_mm:.2f} mm")
    dataio.write_report(os.path.join(args.out, "train_report.json"), payload)
    dataio.svg_line_chart(os.path.join(args.out, "loss.svg"),
                          {"train loss": (history["epoch"], history["loss"])},
                          title="training loss", xlabel="epoch", ylabel="loss")
    print(f"wrote {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    model, transform, header = train.load_checkpoint(doc["paths"]["checkpoint"])
    mode = doc.get("mode", header.get("mode", "conditioned"))
    _, test_set, _ = _load_split_samples(doc, seed, model.config.t_seq)
    if test_set is None:
        raise train.DataMissing("split produced no test clips")
    report = train.evaluate(model, test_set, transform, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_report(os.path.join(args.out, "eval_report.json"),
                        {"eval": report.to_dict(), "mode": mode, "seed": seed})
    print(f"MPJPE {report.mpjpe_mm:.2f} mm; PCK@20 {report.pck[20.0]:.1f}%, PCK@50 {report.pck[50.0]:.1f}%")
    return 0


def _cmd_ablate(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    model_config = _model_config(doc)
    train_config = _train_config(doc, seed)
    modes = tuple(doc.get("modes", ("conditioned", "no_align", "no_spatial_pe")))
    train_set, test_set, _ = _load_split_samples(doc, seed, model_config.t_seq)
    if train_set is None or test_set is None:
        raise train.DataMissing("ablation needs both train and test clips")
    table = train.run_ablation(train_set, test_set, model_config, train_config, modes=modes, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_report(os.path.join(args.out, "ablation_report.json"),
                        {"ablation": table, "seed": seed})
    dataio.svg_bar_chart(os.path.join(args.out, "ablation.svg"), list(table),
                         [table[m]["mpjpe_mm"] for m in table],
                         title="ablation: test MPJPE by mode", ylabel="MPJPE (mm)")
    for mode in table:
        print(f"{mode}: MPJPE {table[mode]['mpjpe_mm']:.2f} mm")
    return 0


def _cmd_perturb(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    model, transform, header = train.load_checkpoint(doc["paths"]["checkpoint"])
    mode = doc.get("mode", header.get("mode", "conditioned"))
    sigmas = [float(s) for s in doc.get("sigmas", (0.0, 0.01, 0.1, 1.0))]
    if args.sigma is not None:
        sigmas = [args.sigma]
    _, test_set, _ = _load_split_samples(doc, seed, model.config.t_seq)
    if test_set is None:
        raise train.DataMissing("split produced no test clips")
    curve = train.sensitivity_sweep(model, transform, test_set, sigmas, seed=seed, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_report(os.path.join(args.out, "perturb_report.json"),
                        {"sweep": curve, "mode": mode, "seed": seed})
    dataio.svg_line_chart(os.path.join(args.out, "perturb.svg"),
                          {"MPJPE": ([c["sigma"] for c in curve], [c["mpjpe_mm"] for c in curve])},
                          title="coordinate-error sensitivity", xlabel="sigma (m)", ylabel="MPJPE (mm)")
    for c in curve:
        print(f"sigma {c['sigma']:g} m: MPJPE {c['mpjpe_mm']:.2f} mm")
    return 0


def _cmd_export_features(args) -> int:
    doc = _load_config(args.config)
    seed = _resolve_seed(args, doc)
    model, _, header = train.load_checkpoint(doc["paths"]["checkpoint"])
    mode = doc.get("mode", header.get("mode", "conditioned"))
    _, test_set, _ = _load_split_samples(doc, seed, model.config.t_seq)
    if test_set is None:
        raise train.DataMissing("split produced no test clips")
    os.makedirs(args.out, exist_ok=True)
    shape = train.export_features(model, test_set, mode,
                                  os.path.join(args.out, "decoder_features.pacs"),
                                  os.path.join(args.out, "feature_labels.json"))
    print(f"exported {shape[0]} feature rows of dim {shape[1]}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfpose",
                                     description="geometry-conditioned WiFi pose toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "calibrate": (_cmd_calibrate, "solve board poses and unify device coordinates"),
        "simulate": (_cmd_simulate, "generate the synthetic CSI dataset"),
        "preprocess": (_cmd_preprocess, "cache feature maps for training"),
        "train": (_cmd_train, "train a pose regressor on a split"),
        "eval": (_cmd_eval, "evaluate a checkpoint on a split"),
        "ablate": (_cmd_ablate, "train and compare conditioning modes"),
        "perturb": (_cmd_perturb, "device-coordinate error sensitivity sweep"),
        "export-features": (_cmd_export_features, "dump decoder-input features"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--config", type=str, default=None, help="JSON configuration file")
        p.add_argument("--out", type=str, default=".", help="output directory")
        if name == "perturb":
            p.add_argument("--sigma", type=float, default=None,
                           help="evaluate a single perturbation magnitude (m)")
        p.set_defaults(fn=fn)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception:
        traceback.print_exc()
        return 1


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
