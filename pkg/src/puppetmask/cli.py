"""Command-line pipeline driver.

Commands: train, collect, craft, eval, sweep, classifier-attack.
Each command reads an optional ``--config`` file of ``key = value``
lines; every config key is also available as a ``--key value`` flag
overriding the file.  Outputs land in a fresh ``<out_root>/<name>/``
run directory together with the fully resolved config.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import blackbox, storage
from .attacks import (
    AttackBudget,
    collect_episodes,
    craft_masks,
    dataset_from_trace,
    MaskSet,
)
from .classifier import (
    classifier_accuracy,
    craft_universal_classifier,
    make_shapes_dataset,
    train_classifier,
)
from .config import REQUIRED, ConfigError, load_config_file, resolve, write_resolved
from .dqn import TrainConfig, train_dqn
from .gridworld import GridPursuit, ScriptedFarSeeker
from .harness import (
    ScenarioConfig,
    report,
    run_scenario,
    sweep_cells,
    write_sweep_csv,
)
from .policy import ConvNet, evaluate_policy

DEFAULT_EPS_GRID = "0.005,0.01,0.02,0.04,0.08"
DEFAULT_ALPHA_GRID = "0,1e-6,1e-5,1e-4"

_BASE = {
    "name": ("str", REQUIRED),
    "out_root": ("str", "runs"),
    "overwrite": ("bool", False),
    "workers": ("int", 1),
}

_ENV = {
    "sticky": ("float", 0.25),
    "hazards": ("int", 3),
}

SCHEMAS = {
    "train": {
        **_BASE,
        **_ENV,
        "steps": ("int", REQUIRED),
        "seed": ("int", 0),
        "replay_capacity": ("int", 10000),
        "batch_size": ("int", 32),
        "target_sync": ("int", 1000),
        "train_interval": ("int", 4),
        "warmup": ("int", 500),
        "epsilon_decay_steps": ("int", 0),
        "gamma": ("float", 0.99),
        "learning_rate": ("float", 1e-3),
        "eval_episodes": ("int", 50),
        "eval_seed": ("int", 10_000),
    },
    "collect": {
        **_BASE,
        **_ENV,
        "policy": ("str", REQUIRED),
        "n": ("int", 10000),
        "seed": ("int", 0),
    },
    "craft": {
        **_BASE,
        "mode": (None, "whitebox"),  # whitebox | blackbox
        "policy": ("str", REQUIRED),
        "proxies": ("str", ""),
        "dataset": ("str", REQUIRED),
        "epsilon": ("float", REQUIRED),
        "alpha": ("float", 0.0),
        "epochs": ("int", 0),  # 0 -> 10 whitebox, 100 blackbox
        "batch_size": ("int", 8),
        "learning_rate": ("float", 0.05),
        "temperature": ("float", 1.0),
        "candidates": ("int", blackbox.DEFAULT_CANDIDATES),
        "trials": ("int", 200),
        "seed": ("int", 0),
    },
    "eval": {
        **_BASE,
        **_ENV,
        "attack": (None, REQUIRED),  # none | masks | fgsm | ifgsm
        "policies": ("str_list", REQUIRED),
        "target": ("str", REQUIRED),
        "masks": ("str_list", []),
        "episodes": ("int", 80),
        "seeds": ("int_list", [0, 1, 2, 3, 4]),
        "epsilon": ("float", 0.0),
        "alpha": ("float", 0.0),
        "temperature": ("float", 1.0),
        "ifgsm_steps": ("int", 10),
        "ifgsm_step_size": ("float", 0.0),
        "scenario": ("str", ""),
        "timing": ("bool", True),
    },
    "sweep": {
        **_BASE,
        **_ENV,
        "policies": ("str_list", REQUIRED),
        "target": ("str", REQUIRED),
        "datasets": ("str_list", REQUIRED),
        "eps_list": ("float_list", None),
        "alpha_list": ("float_list", None),
        "episodes": ("int", 80),
        "seeds": ("int_list", [0, 1, 2, 3, 4]),
        "epochs": ("int", 10),
        "batch_size": ("int", 8),
        "learning_rate": ("float", 0.05),
        "temperature": ("float", 1.0),
        "craft_seed": ("int", 0),
        "timing": ("bool", True),
    },
    "classifier-attack": {
        **_BASE,
        "target_label": ("int", REQUIRED),
        "epsilon": ("float", REQUIRED),
        "alpha": ("float", 0.0),
        "epochs": ("int", 200),
        "batch_size": ("int", 8),
        "learning_rate": ("float", 0.05),
        "images": ("int", 1000),
        "train_count": ("int", 80),
        "classifier_steps": ("int", 600),
        "seed": ("int", 0),
    },
}
SCHEMAS["craft"]["mode"] = (lambda s: _choice(s, ("whitebox", "blackbox")), "whitebox")
SCHEMAS["eval"]["attack"] = (
    lambda s: _choice(s, ("none", "masks", "fgsm", "ifgsm")),
    REQUIRED,
)
SCHEMAS["sweep"]["eps_list"] = (
    "float_list",
    [float(x) for x in DEFAULT_EPS_GRID.split(",")],
)
SCHEMAS["sweep"]["alpha_list"] = (
    "float_list",
    [float(x) for x in DEFAULT_ALPHA_GRID.split(",")],
)


def _choice(s, options):
    if s not in options:
        raise ValueError(f"must be one of {options}, got {s!r}")
    return s


def _gather_raw(args, schema):
    raw = {}
    if args.config:
        raw.update(load_config_file(args.config))
    for key in schema:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            raw[key] = value
    return raw


def _prepare_run_dir(cfg):
    run_dir = Path(cfg["out_root"]) / cfg["name"]
    if run_dir.exists() and any(run_dir.iterdir()) and not cfg["overwrite"]:
        raise ConfigError(
            f"run directory {run_dir} already exists (set overwrite = true to reuse)"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(run_dir / "config.resolved", cfg)
    return run_dir


def _make_env(cfg):
    return GridPursuit(sticky=cfg["sticky"], n_hazards=cfg["hazards"])


def _load_policy(path):
    path = Path(path)
    manifest = storage.load_manifest(path.with_suffix(".json"))
    policy = ConvNet.from_manifest(manifest["arch"])
    policy.load_state_dict(storage.load_checkpoint(path))
    return policy, manifest


def _save_policy(policy, path, manifest_extra):
    path = Path(path)
    storage.save_checkpoint(path, policy.state_dict())
    manifest = {"arch": policy.arch_manifest()}
    manifest.update(manifest_extra)
    storage.save_manifest(path.with_suffix(".json"), manifest)


def _load_target(spec_str):
    if spec_str == "scripted":
        return ScriptedFarSeeker()
    policy, _ = _load_policy(spec_str)
    return policy


def cmd_train(cfg):
    run_dir = _prepare_run_dir(cfg)
    try:
        train_cfg = TrainConfig(
            steps=cfg["steps"],
            replay_capacity=cfg["replay_capacity"],
            batch_size=cfg["batch_size"],
            target_sync=cfg["target_sync"],
            train_interval=cfg["train_interval"],
            warmup=cfg["warmup"],
            epsilon_decay_steps=cfg["epsilon_decay_steps"],
            gamma=cfg["gamma"],
            learning_rate=cfg["learning_rate"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    policy = train_dqn(_make_env(cfg), train_cfg)
    mean, std, _ = evaluate_policy(
        policy, _make_env(cfg), cfg["eval_episodes"], seed=cfg["eval_seed"]
    )
    _save_policy(
        policy,
        run_dir / "policy.nwt",
        {
            "seed": cfg["seed"],
            "train_steps": cfg["steps"],
            "eval_return_mean": mean,
            "eval_return_std": std,
            "eval_episodes": cfg["eval_episodes"],
            "sticky": cfg["sticky"],
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )
    print(f"trained {cfg['steps']} steps; eval return {mean:.3f} +/- {std:.3f}")
    print(f"checkpoint: {run_dir / 'policy.nwt'}")
    return 0


def cmd_collect(cfg):
    run_dir = _prepare_run_dir(cfg)
    policy, _ = _load_policy(cfg["policy"])
    episodes = collect_episodes(policy, _make_env(cfg), cfg["n"], seed=cfg["seed"])
    out = run_dir / "dataset.eptr"
    storage.save_trace(out, episodes)
    total = sum(len(ep) for ep in episodes)
    print(f"collected {total} observations over {len(episodes)} episodes -> {out}")
    return 0


def cmd_craft(cfg):
    if cfg["epsilon"] <= 0:
        raise ConfigError(f"epsilon must be > 0, got {cfg['epsilon']}")
    run_dir = _prepare_run_dir(cfg)
    dataset = dataset_from_trace(storage.load_trace(cfg["dataset"]))
    epochs = cfg["epochs"] or (10 if cfg["mode"] == "whitebox" else blackbox.DEFAULT_EPOCHS)
    budget = AttackBudget(
        epsilon=cfg["epsilon"],
        alpha=cfg["alpha"],
        epochs=epochs,
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
    )
    victim, _ = _load_policy(cfg["policy"])
    if cfg["mode"] == "whitebox":
        mask_set = craft_masks(
            victim,
            dataset,
            budget,
            seed=cfg["seed"],
            temperature=cfg["temperature"],
            workers=cfg["workers"],
        )
    else:
        if not cfg["proxies"]:
            raise ConfigError("blackbox mode needs a comma-separated proxies list")
        proxies = [_load_policy(p)[0] for p in cfg["proxies"].split(",")]
        mask_set, _ = blackbox.run_blackbox(
            victim,
            proxies,
            dataset,
            budget,
            n_candidates=cfg["candidates"],
            n_trials=cfg["trials"],
            seed=cfg["seed"],
            temperature=cfg["temperature"],
            workers=cfg["workers"],
        )
    provenance = dict(mask_set.provenance)
    provenance["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    provenance["source_policy"] = cfg["policy"]
    out = run_dir / "masks.cpyc"
    storage.save_masks(out, mask_set.masks, mask_set.epsilon, mask_set.alpha, provenance)
    print(f"crafted {mask_set.action_count} masks -> {out}")
    return 0


def _load_mask_sets(cfg, n_policies):
    paths = cfg["masks"]
    if not paths:
        raise ConfigError("attack = masks needs a masks file list")
    if len(paths) not in (1, n_policies):
        raise ConfigError(
            f"masks list must have 1 or {n_policies} entries, got {len(paths)}"
        )
    sets = []
    for p in paths:
        masks, eps, alpha, provenance = storage.load_masks(p)
        sets.append(MaskSet(masks, eps, alpha, provenance))
    if len(sets) == 1:
        sets = sets * n_policies
    return sets


def cmd_eval(cfg):
    run_dir = _prepare_run_dir(cfg)
    policies = [_load_policy(p)[0] for p in cfg["policies"]]
    target = _load_target(cfg["target"])
    seeds = cfg["seeds"]
    if len(policies) not in (1, len(seeds)):
        raise ConfigError(
            f"policies list must have 1 or {len(seeds)} entries, got {len(policies)}"
        )
    if len(policies) == 1:
        policies = policies * len(seeds)

    mask_sets = None
    if cfg["attack"] == "masks":
        mask_sets = _load_mask_sets(cfg, len(policies))
        for ms, pi in zip(mask_sets, policies):
            if ms.action_count != pi.action_count:
                raise ConfigError(
                    f"mask file has {ms.action_count} actions but policy has "
                    f"{pi.action_count}"
                )

    rows = []
    for i, (pi, seed) in enumerate(zip(policies, seeds)):
        mask_set = mask_sets[i] if mask_sets else None
        scenario = ScenarioConfig(
            attacked_policy_id=str(cfg["policies"][min(i, len(cfg["policies"]) - 1)]),
            target_policy_id=str(cfg["target"]),
            attack=cfg["attack"],
            epsilon=mask_set.epsilon if mask_set else cfg["epsilon"],
            alpha=mask_set.alpha if mask_set else cfg["alpha"],
            episodes=cfg["episodes"],
            seed=seed,
            sticky=cfg["sticky"],
            temperature=cfg["temperature"],
            ifgsm_steps=cfg["ifgsm_steps"],
            ifgsm_step_size=cfg["ifgsm_step_size"],
            label=cfg["scenario"] or cfg["attack"],
            measure_time=cfg["timing"],
        )
        metrics = run_scenario(pi, target, _make_env(cfg), scenario, mask_set=mask_set)
        rows.append(metrics.row())
        print(
            f"seed {seed}: success_rate={metrics.success_rate:.4f} "
            f"return={metrics.mean_return:.3f}"
        )
    csv_path, json_path = report(rows, run_dir)
    print(f"report: {csv_path}")
    return 0


def cmd_sweep(cfg):
    run_dir = _prepare_run_dir(cfg)
    policies = [_load_policy(p)[0] for p in cfg["policies"]]
    target = _load_target(cfg["target"])
    datasets = [dataset_from_trace(storage.load_trace(p)) for p in cfg["datasets"]]
    if len(datasets) not in (1, len(policies)):
        raise ConfigError(
            f"datasets list must have 1 or {len(policies)} entries, got {len(datasets)}"
        )
    if len(datasets) == 1:
        datasets = datasets * len(policies)
    seeds = cfg["seeds"][: len(policies)]
    budget_template = AttackBudget(
        epsilon=1.0,
        alpha=0.0,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
    )
    all_rows = []
    for pi, dataset, seed, pid in zip(policies, datasets, seeds, cfg["policies"]):
        template = ScenarioConfig(
            attacked_policy_id=str(pid),
            target_policy_id=str(cfg["target"]),
            attack="masks",
            episodes=cfg["episodes"],
            seed=seed,
            sticky=cfg["sticky"],
            temperature=cfg["temperature"],
            measure_time=cfg["timing"],
        )
        rows, _ = sweep_cells(
            pi,
            target,
            dataset,
            _make_env(cfg),
            cfg["eps_list"],
            cfg["alpha_list"],
            template,
            budget_template,
            craft_seed=cfg["craft_seed"],
        )
        all_rows.extend(rows)
    out = write_sweep_csv(all_rows, run_dir / "sweep.csv")
    failures = sum(1 for r in all_rows if r.get("error"))
    print(f"sweep: {len(all_rows)} cells, {failures} failed -> {out}")
    return 0


def cmd_classifier_attack(cfg):
    if cfg["epsilon"] <= 0:
        raise ConfigError(f"epsilon must be > 0, got {cfg['epsilon']}")
    run_dir = _prepare_run_dir(cfg)
    images, labels = make_shapes_dataset(cfg["images"], seed=cfg["seed"])
    net = train_classifier(images, labels, steps=cfg["classifier_steps"], seed=cfg["seed"])
    clean_acc = classifier_accuracy(net, images, labels)
    budget = AttackBudget(
        epsilon=cfg["epsilon"],
        alpha=cfg["alpha"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
    )
    mask, rep = craft_universal_classifier(
        net,
        images,
        cfg["target_label"],
        budget,
        seed=cfg["seed"],
        train_count=cfg["train_count"],
    )
    rep["classifier_clean_accuracy"] = clean_acc
    storage.save_masks(
        run_dir / "masks.cpyc",
        mask[None],
        budget.epsilon,
        budget.alpha,
        {"mode": "classifier", "created_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
    )
    storage.save_manifest(run_dir / "summary.json", rep)
    print(
        f"targeted accuracy: train={rep['train_accuracy']:.4f} "
        f"test={rep['test_accuracy']:.4f} (clean classifier acc {clean_acc:.4f})"
    )
    return 0


COMMANDS = {
    "train": cmd_train,
    "collect": cmd_collect,
    "craft": cmd_craft,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "classifier-attack": cmd_classifier_attack,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="puppetmask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        for key in schema:
            p.add_argument(f"--{key}", default=None, help=f"override config key {key}")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    schema = SCHEMAS[args.command]
    try:
        cfg = resolve(schema, _gather_raw(args, schema))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
