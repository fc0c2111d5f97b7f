"""Experiment runner: train / eval / calibrate / sweep / diag / gen-curves /
oracle, driven by a strict YAML config.

Artifacts land under <out>/<config_hash>/: report.json and epochs.csv are
deterministic given (config, seed); wall clock goes to a sidecar file.
"""
from __future__ import annotations

import argparse
import importlib.resources
import itertools
import json
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import __version__, oracle
from .config import ConfigError, bits_value, dump_config, load_config
from .datasets import DatasetSpec, load_dataset, make_augment
from .diag import (
    bn_drift_study,
    gradient_ratio_check,
    noise_error_study,
    scale_ratio_study,
)
from .models import build_cnn, build_mlp, build_model
from .nn import EvalInterface, load_checkpoint, save_checkpoint
from .nonideal import (
    NoiseModel,
    VariationSpec,
    generate_variation_curves,
    load_curve_bank,
    save_curve_bank,
)
from .pim import mac_bit_serial, mac_differential, mac_native, PimConfig
from .quant import QTensor, decompose_activation, decompose_weight_bits
from .report import RunReport, config_hash
from .train import CalibSpec, TrainConfig, bn_calibrate, evaluate, train


def _dataset_spec(cfg) -> DatasetSpec:
    d = cfg["dataset"]
    return DatasetSpec(kind=d["kind"], path=d["path"],
                       train_size=d["train_size"], test_size=d["test_size"],
                       classes=d["classes"], shape=tuple(d["shape"]),
                       noise=d["noise"], jitter=d["jitter"],
                       separation=d["separation"], seed=d["seed"],
                       augment=d["augment"])


def _build_model(cfg):
    m, p = cfg["model"], cfg["pim"]
    common = dict(scheme=p["scheme"], b_imc=bits_value(p["b_train"]),
                  dac_bits=p["dac_bits"], b_w=p["b_w"], b_a=p["b_a"],
                  unit_out_channels=p["unit_out_channels"], eta=p["eta"],
                  rescale_backward=p["rescale_backward"],
                  pim_enabled=p["enabled"], seed=m["seed"])
    if m["kind"] == "cnn":
        return build_cnn(in_ch=m["in_ch"], classes=m["classes"],
                         blocks=tuple(m["blocks"]),
                         pool_after=tuple(m["pool_after"]),
                         unit_in_channels=p["unit_in_channels"], **common)
    if m["kind"] == "mlp":
        return build_mlp(n_in=m["n_in"], classes=m["classes"],
                         hidden=tuple(m["hidden"]),
                         unit_in_channels=p["unit_in_channels"], **common)
    raise ConfigError(f"model.kind {m['kind']!r} not runnable from the CLI")


def _interface(cfg) -> EvalInterface:
    i = cfg["interface"]
    curves = load_curve_bank(i["curves"]) if i["curves"] else None
    noise = (NoiseModel(float(i["sigma_lsb"]), seed=i["noise_seed"])
             if i["sigma_lsb"] > 0 else None)
    return EvalInterface(b_imc=bits_value(i["b_imc"]), curves=curves,
                         noise=noise)


def _train_config(cfg, seed, threads) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       lr0=t["lr0"], lr_milestones=tuple(t["lr_milestones"]),
                       lr_decay=t["lr_decay"], momentum=t["momentum"],
                       nesterov=t["nesterov"], weight_decay=t["weight_decay"],
                       seed=seed, eval_every=t["eval_every"],
                       n_threads=threads)


def _out_dir(cfg, out_override):
    base = out_override or cfg["run"]["out"]
    return os.path.join(base, config_hash(cfg))


def _settings(cfg):
    return {"scheme": cfg["pim"]["scheme"], "b_train": cfg["pim"]["b_train"],
            "b_imc": cfg["interface"]["b_imc"],
            "sigma_lsb": cfg["interface"]["sigma_lsb"],
            "pim_enabled": cfg["pim"]["enabled"],
            "dataset": cfg["dataset"]["kind"]}


def cmd_train(cfg, args):
    t0 = time.monotonic()
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    data = load_dataset(_dataset_spec(cfg))
    model = _build_model(cfg)
    rec = train(model, data, _train_config(cfg, seed, args.threads),
                augment=make_augment(_dataset_spec(cfg)),
                progress=lambda ep: print(
                    f"epoch {ep['epoch']:3d} lr {ep['lr']:.4f} "
                    f"loss {ep['train_loss']:.4f} acc {ep['train_acc']:.4f}"
                    + (f" eval {ep['eval_acc']:.4f}" if "eval_acc" in ep else "")))
    out = _out_dir(cfg, args.out)
    report = RunReport(config=cfg, seed=seed, command="train",
                       epochs=rec["epochs"],
                       final={"train_acc": rec["final_train_acc"],
                              "eval_acc": rec["final_eval_acc"],
                              "diverged_epoch": rec["diverged_epoch"]},
                       settings=_settings(cfg),
                       wall_clock_s=time.monotonic() - t0)
    rp = report.write(out)
    save_checkpoint(os.path.join(out, "model.npz"), model,
                    extra={"seed": seed, "config_hash": report.config_hash})
    print(f"train: final train_acc={rec['final_train_acc']} "
          f"eval_acc={rec['final_eval_acc']} "
          f"diverged={rec['diverged_epoch']}")
    print(f"artifacts: {rp}")
    return 0


def _load_model_for(cfg, args):
    path = args.checkpoint or cfg["checkpoint"]
    if not path:
        raise ConfigError("eval/calibrate need a checkpoint "
                          "(--checkpoint or config key)")
    meta, arrays = load_checkpoint(path)
    model = build_model(meta["model_spec"])
    model.load_state_arrays(arrays)
    return model, meta


def cmd_eval(cfg, args):
    t0 = time.monotonic()
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    model, _ = _load_model_for(cfg, args)
    data = load_dataset(_dataset_spec(cfg))
    acc = evaluate(model, (data[2], data[3]), _interface(cfg),
                   batch_size=cfg["train"]["batch_size"],
                   n_threads=args.threads)
    out = _out_dir(cfg, args.out)
    report = RunReport(config=cfg, seed=seed, command="eval",
                       final={"accuracy": acc}, settings=_settings(cfg),
                       wall_clock_s=time.monotonic() - t0)
    rp = report.write(out)
    print(f"eval: accuracy={acc}")
    print(f"artifacts: {rp}")
    return 0


def cmd_calibrate(cfg, args):
    t0 = time.monotonic()
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    model, meta = _load_model_for(cfg, args)
    data = load_dataset(_dataset_spec(cfg))
    c = cfg["calibrate"]
    spec = CalibSpec(num_batches=c["num_batches"], batch_size=c["batch_size"],
                     seed=c["seed"], apply_nonideal=c["apply_nonideal"])
    bn_calibrate(model, data, spec, _interface(cfg), n_threads=args.threads)
    out = _out_dir(cfg, args.out)
    ck = os.path.join(out, "model_calibrated.npz")
    os.makedirs(out, exist_ok=True)
    save_checkpoint(ck, model, extra=meta.get("extra", {}))
    acc = evaluate(model, (data[2], data[3]), _interface(cfg),
                   batch_size=cfg["train"]["batch_size"],
                   n_threads=args.threads)
    report = RunReport(config=cfg, seed=seed, command="calibrate",
                       final={"accuracy_after_calibration": acc},
                       settings=_settings(cfg),
                       wall_clock_s=time.monotonic() - t0)
    rp = report.write(out)
    print(f"calibrate: accuracy={acc}")
    print(f"artifacts: {rp}\ncheckpoint: {ck}")
    return 0


def _apply_axis(cfg, axis, value):
    cfg = json.loads(json.dumps(cfg))  # deep copy
    if axis == "sigma_lsb":
        cfg["interface"]["sigma_lsb"] = value
    elif axis == "scheme":
        cfg["pim"]["scheme"] = value
    elif axis == "b_imc":
        cfg["interface"]["b_imc"] = value
    elif axis == "b_train":
        cfg["pim"]["b_train"] = value
    return cfg


def cmd_sweep(cfg, args):
    axes = cfg["sweep"]["axes"]
    if not axes:
        raise ConfigError("sweep.axes is empty")
    seed = args.seed if args.seed is not None else cfg["run"]["seed"]
    names = sorted(axes)
    out = _out_dir(cfg, args.out)
    rows = []
    for k, combo in enumerate(itertools.product(*(axes[n] for n in names))):
        child = cfg
        for n, v in zip(names, combo):
            child = _apply_axis(child, n, v)
        child_seed = seed + k
        data = load_dataset(_dataset_spec(child))
        model = _build_model(child)
        rec = train(model, data, _train_config(child, child_seed, args.threads),
                    augment=make_augment(_dataset_spec(child)))
        if cfg["sweep"]["calibrate_children"]:
            c = child["calibrate"]
            bn_calibrate(model, data,
                         CalibSpec(num_batches=c["num_batches"],
                                   batch_size=c["batch_size"], seed=c["seed"],
                                   apply_nonideal=c["apply_nonideal"]),
                         _interface(child), n_threads=args.threads)
        acc = evaluate(model, (data[2], data[3]), _interface(child),
                       batch_size=child["train"]["batch_size"],
                       n_threads=args.threads)
        child_dir = os.path.join(out, f"cell{k:03d}")
        RunReport(config=child, seed=child_seed, command="sweep-cell",
                  epochs=rec["epochs"],
                  final={"accuracy": acc,
                         "diverged_epoch": rec["diverged_epoch"]},
                  settings=_settings(child)).write(child_dir)
        rows.append(dict(zip(names, combo)) | {"accuracy": acc})
        print(f"cell {k}: {dict(zip(names, combo))} -> acc={acc}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "grid.json"), "w") as f:
        json.dump(rows, f, indent=1, sort_keys=True)
        f.write("\n")
    import csv as _csv
    with open(os.path.join(out, "grid.csv"), "w", newline="") as f:
        w = _csv.DictWriter(f, fieldnames=names + ["accuracy"])
        w.writeheader()
        w.writerows(rows)
    print(f"sweep: {len(rows)} cells -> {out}/grid.csv")
    return 0


def cmd_diag(cfg, args):
    d = cfg["diag"]
    seed = args.seed if args.seed is not None else d["seed"]
    out = _out_dir(cfg, args.out)
    study = d["study"]
    if study == "scale_ratio":
        table = scale_ratio_study(d["b_imc_list"], samples=d["samples"],
                                  scheme=cfg["pim"]["scheme"],
                                  dac_bits=d["dac_bits"], seed=seed)
    elif study == "bn_drift":
        curves = None
        if d["use_curves"]:
            if d["curves"]:
                curves = load_curve_bank(d["curves"])
            else:
                ref = importlib.resources.files("pimtrain.data") \
                    / "chip7b_demo.curves"
                with importlib.resources.as_file(ref) as p:
                    curves = load_curve_bank(p)
        table = bn_drift_study(d["sigmas"], curves=curves, b_imc=d["bits"],
                               samples=d["samples"], dac_bits=d["dac_bits"],
                               scheme=cfg["pim"]["scheme"], seed=seed)
    elif study == "gradient_ratio":
        table = gradient_ratio_check(blocks=d["blocks"], width=d["width"],
                                     batches=d["batches"],
                                     batch_size=d["batch_size"],
                                     scheme=cfg["pim"]["scheme"],
                                     b_imc=cfg["pim"]["b_train"],
                                     dac_bits=d["dac_bits"],
                                     xi_policy=d["xi_policy"], seed=seed)
    else:
        table = noise_error_study(b=d["bits"], sigmas=tuple(d["sigmas"]),
                                  samples=max(d["samples"], 1000), seed=seed)
    path = table.write(out, study)
    print(f"diag {study}: {path}")
    return 0


def cmd_gen_curves(cfg, args):
    g = cfg["gen_curves"]
    bank = generate_variation_curves(
        g["bits"], g["count"],
        VariationSpec(g["sigma_offset"], g["sigma_gain"], seed=g["seed"]))
    out = _out_dir(cfg, args.out)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, g["out_file"])
    save_curve_bank(path, bank)
    print(f"gen-curves: {g['count']} x {g['bits']}-bit -> {path}")
    return 0


def _run_case(case):
    scheme = case["scheme"]
    b_w, b_a, m, b_imc = case["b_w"], case["b_a"], case["m"], case["b_imc"]
    n = len(case["wcodes"])
    lv = 2 ** (b_w - 1) - 1
    wcodes = np.array(case["wcodes"], dtype=np.int64)
    acodes = np.array(case["acodes"], dtype=np.int64)
    cfg = PimConfig(scheme=scheme, n_group=n, b_imc=b_imc, dac_bits=m,
                    b_w=b_w, b_a=b_a)
    wq = QTensor(wcodes / lv, b_w, "unit_signed", wcodes)
    aq = QTensor(acodes / (2 ** b_a - 1), b_a, "unit", acodes)
    planes = decompose_activation(aq, m)
    if scheme == "native":
        return mac_native(wq, planes, cfg).value_pim
    if scheme == "differential":
        return mac_differential(wq, planes, cfg).value_pim
    return mac_bit_serial(decompose_weight_bits(wq, b_w), planes,
                          cfg).value_pim


def cmd_oracle(cfg, args):
    if args.cases:
        with open(args.cases) as f:
            doc = json.load(f)
    else:
        ref = importlib.resources.files("pimtrain.data") / "mac_cases_v1.json"
        doc = json.loads(ref.read_text())
    if doc.get("format") != "pim-mac-cases":
        print("oracle: unrecognized case file", file=sys.stderr)
        return 2
    bad = 0
    for i, case in enumerate(doc["cases"]):
        want = oracle.evaluate_case(case)
        if "expected" in case:
            p, q = case["expected"].split("/")
            if want != Fraction(int(p), int(q)):
                print(f"case {i}: oracle disagrees with shipped value")
                bad += 1
                continue
        got = _run_case(case)
        if got != float(want):
            print(f"case {i} ({case['scheme']}): impl {got!r} != "
                  f"oracle {float(want)!r}")
            bad += 1
    n = len(doc["cases"])
    print(f"oracle: {n - bad}/{n} cases bit-exact")
    return 0 if bad == 0 else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "diag": cmd_diag,
    "gen-curves": cmd_gen_curves,
    "oracle": cmd_oracle,
}


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="pimtrain",
        description="Analog-MAC quantization simulator and training runner")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="YAML run config", default=None)
    ap.add_argument("--out", help="output directory root", default=None)
    ap.add_argument("--seed", type=int, default=None,
                    help="override run.seed")
    ap.add_argument("--threads", type=int, default=0,
                    help="MAC kernel threads (0: library default)")
    ap.add_argument("--checkpoint", default=None,
                    help="model checkpoint for eval/calibrate")
    ap.add_argument("--cases", default=None,
                    help="case file for the oracle command")
    ap.add_argument("--version", action="version", version=__version__)
    args = ap.parse_args(argv)
    if args.command == "oracle" and args.config is None:
        cfg = None
    else:
        if args.config is None:
            ap.error(f"{args.command} requires --config")
        try:
            cfg = load_config(args.config)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
