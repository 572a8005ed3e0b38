"""The declarative model grid: eleven models trained and evaluated alike.

Order and naming follow the usual results table: four l-inf PGD models,
three l2 PGD models, two FGSM models, the standard model and an underfit
model whose stopping accuracy is borrowed from a paired adversarial model.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .attacks import AttackConfig
from .data import NO_AUGMENTATION, AugmentationSpec
from .errors import ConfigurationError

_PX = 1 / 255

# (name, norm, epsilon, step) in table order
ADVERSARIAL_MODELS = [
    ("pgd_linf_8", "linf", 8 * _PX, 4 * _PX),
    ("pgd_linf_4", "linf", 4 * _PX, 2 * _PX),
    ("pgd_linf_2", "linf", 2 * _PX, 1 * _PX),
    ("pgd_linf_1", "linf", 1 * _PX, 1 * _PX),
    ("pgd_l2_1.2", "l2", 1.2, 6 * _PX),
    ("pgd_l2_0.8", "l2", 0.8, 4 * _PX),
    ("pgd_l2_0.4", "l2", 0.4, 2 * _PX),
    ("fgsm_8", "fgsm", 8 * _PX, 8 * _PX),
    ("fgsm_4", "fgsm", 4 * _PX, 4 * _PX),
]
MODEL_NAMES = [m[0] for m in ADVERSARIAL_MODELS] + ["standard", "underfit"]

DEFAULTS = {
    "train_data": "synthetic:n=4000,seed=1",
    "test_data": "synthetic:n=1000,seed=2",
    "seed": 0,
    "stages": [[16, 2], [32, 2], [64, 2]],
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "schedule": "cosine",
        "grad_clip": 1.0,
        "clean_warmup_epochs": 0,
        "epsilon_warmup_epochs": 0,
        "augment": True,
    },
    "adversary_iterations": 20,
    "underfit_pair": "pgd_linf_8",
    "underfit_target": None,
    "models": MODEL_NAMES,
    "sweep": None,
    "eval_limit": None,
    "robustness_limit": None,
}

_count = {"type": ["integer", "null"], "minimum": 1}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "train_data": {"type": "string"},
        "test_data": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "schedule": {"enum": ["cosine", "constant"]},
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "clean_warmup_epochs": {"type": "integer", "minimum": 0},
                "epsilon_warmup_epochs": {"type": "integer", "minimum": 0},
                "augment": {"type": "boolean"},
            },
        },
        "adversary_iterations": {"type": "integer", "minimum": 1},
        "underfit_pair": {"enum": [m[0] for m in ADVERSARIAL_MODELS]},
        "underfit_target": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "models": {"type": "array", "items": {"enum": MODEL_NAMES}, "uniqueItems": True},
        "sweep": {"type": ["array", "null"], "items": {"type": "string"}},
        "eval_limit": _count,
        "robustness_limit": _count,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def validate_grid_config(doc: dict) -> dict:
    """Validate against the schema and fill defaults; errors name the offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(f"grid config field {where}: {err.message}")
    return _merge(DEFAULTS, doc)


def load_grid_config(path) -> dict:
    if path is None:
        return validate_grid_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return validate_grid_config(doc)


def _attack_for(name: str, norm: str, eps: float, step: float, cfg: dict) -> AttackConfig:
    if norm == "fgsm":
        return AttackConfig.fgsm(eps, seed=cfg["seed"])
    return AttackConfig(norm=norm, epsilon=eps, step_size=step, iterations=cfg["adversary_iterations"],
                        random_start=True, seed=cfg["seed"])


def plan_grid(cfg: dict) -> list[dict]:
    """Ordered list of the models to train; always in table order."""
    wanted = set(cfg["models"])
    plan = []
    for name, norm, eps, step in ADVERSARIAL_MODELS:
        if name not in wanted:
            continue
        adv = _attack_for(name, norm, eps, step, cfg)
        if norm == "fgsm":
            desc = f"FGSM eps={eps * 255:g}/255"
        elif norm == "linf":
            desc = f"PGD-linf eps={eps * 255:g}/255 step={step * 255:g}/255 iters={adv.iterations}"
        else:
            desc = f"PGD-l2 eps={eps:g} step={step * 255:g}/255 iters={adv.iterations}"
        plan.append({"name": name, "mode": "adversarial", "adversary": adv.to_dict(), "description": desc})
    if "standard" in wanted:
        plan.append({"name": "standard", "mode": "standard", "adversary": None, "description": "clean training"})
    if "underfit" in wanted:
        if cfg["underfit_target"] is not None:
            desc = f"clean training stopped at val acc {cfg['underfit_target']:g}"
        else:
            desc = f"clean training stopped at the val acc of {cfg['underfit_pair']}"
        plan.append({"name": "underfit", "mode": "underfit", "adversary": None, "description": desc,
                     "pair": cfg["underfit_pair"], "target": cfg["underfit_target"]})
    return plan


def run_grid(cfg: dict, plan: list[dict], out: Path) -> None:
    """Train every planned model, then write robustness and distortion reports."""
    from .cli import DEFAULT_SWEEP, load_dataset
    from .distortions import parse_distortion
    from .evaluation import bias_summary, evaluate_transforms, robust_correct
    from .model import NetworkConfig, build_network, save_checkpoint
    from .plotting import plot_robustness, plot_training_log, plot_transform_curves
    from .training import TrainConfig, evaluate_accuracy, train

    train_set = load_dataset(cfg["train_data"])
    test_set = load_dataset(cfg["test_data"])
    eval_set = test_set.head(cfg["eval_limit"]) if cfg["eval_limit"] else test_set
    rob_set = test_set.head(cfg["robustness_limit"]) if cfg["robustness_limit"] else test_set
    t = cfg["train"]
    net_cfg = NetworkConfig(input_size=(3,) + train_set.images.shape[1:3],
                            stages=tuple(tuple(s) for s in cfg["stages"]),
                            class_count=train_set.class_count, seed=cfg["seed"])
    aug = AugmentationSpec(crop_size=train_set.images.shape[1:3], seed=cfg["seed"]) if t["augment"] else NO_AUGMENTATION
    specs = [parse_distortion(op, seed=cfg["seed"]) for op in (cfg["sweep"] or DEFAULT_SWEEP)]

    final_val: dict[str, float] = {}
    reports, robust_rows = [], []
    for entry in plan:
        name = entry["name"]
        target = None
        if entry["mode"] == "underfit":
            target = entry["target"] if entry["target"] is not None else final_val.get(entry["pair"])
            if target is None:
                raise ConfigurationError(
                    f"underfit model needs {entry['pair']} in the grid or an explicit underfit_target"
                )
        adversary = AttackConfig(**entry["adversary"]) if entry["adversary"] else None
        tcfg = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                           momentum=t["momentum"], weight_decay=t["weight_decay"], schedule=t["schedule"],
                           adversary=adversary, underfit_target_accuracy=target, seed=cfg["seed"],
                           augmentation=aug, grad_clip=t["grad_clip"],
                           clean_warmup_epochs=t["clean_warmup_epochs"] if adversary else 0,
                           epsilon_warmup_epochs=t["epsilon_warmup_epochs"] if adversary else 0)
        net, train_log = train(build_network(net_cfg), train_set, tcfg)
        final_val[name] = train_log.records[-1]["val_acc"] if train_log.records else 0.0
        model_dir = out / name
        model_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, model_dir / "model.ckpt", {"model_id": name, "train": tcfg.to_dict()})
        train_log.write_csv(model_dir / "train_log.csv")
        if train_log.records:
            plot_training_log(train_log.records, model_dir / "train_log.png", title=name)

        clean = evaluate_accuracy(net, rob_set)
        robust = float(robust_correct(net, rob_set).mean())
        robust_rows.append((name, clean, robust))
        reports.append(evaluate_transforms(net, name, eval_set, specs))
        print(f"{name}: clean {clean:.4f} robust {robust:.4f}")

    report = bias_summary(reports)
    report.write_csv(out / "report.csv")
    plot_transform_curves(report, out / "report.png")
    with open(out / "robustness.csv", "w", encoding="utf-8") as fh:
        fh.write("model,n,clean_acc,robust_acc\n")
        for name, clean, robust in robust_rows:
            fh.write(f"{name},{len(rob_set)},{clean!r},{robust!r}\n")
    plot_robustness(robust_rows, out / "robustness.png")
