"""Command-line entry point: gen, train, embed, eval, ablate-dual.

Every subcommand reads an optional JSON config whose keys mirror the flag
names, applies flag overrides, validates the lot, then runs.  Exit status is
0 on success, 1 on invalid configuration or input, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .datasets import PointCloud, PointFileError, Transform, gen_sphere, gen_swiss_roll, load_xyz, normalize, save_xyz, split
from .evaluation import EvalReport, evaluate, pca_embed
from .geometry import pullback_metrics, write_metric_field
from .losses import write_training_log
from .network import load_checkpoint, mlp_forward, save_checkpoint
from .training import DivergenceError, TrainConfig, TrainResult, TrainState, train_loop

COMMANDS = ("gen", "train", "embed", "eval", "ablate-dual")


class ConfigError(ValueError):
    pass


# key -> kind; TrainConfig keys are appended below
_RUN_KEYS = {
    "data": "str?",
    "dataset": "str",
    "n": "int",
    "data_seed": "int",
    "radius": "float",
    "normalize": "bool",
    "holdout": "float",
    "out_dir": "str",
    "run_dir": "str?",
    "out": "str?",
    "eval_on": "str",
    "n_triplets": "int",
    "n_pairs": "int",
    "eval_seed": "int",
    "gammas": "float[]",
}
_TRAIN_KINDS = {"hidden": "int[]", "batch_size": "int?", "sampler": "str", "activation": "str"}
for _f in fields(TrainConfig):
    _TRAIN_KINDS.setdefault(_f.name, "int" if _f.name in ("k", "outer_iters", "inner_imm_iters", "inner_iso_iters", "seed", "latent_dim") else "float")
KEY_KINDS = {**_RUN_KEYS, **_TRAIN_KINDS}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    data: str | None = None
    dataset: str = "swiss_roll"
    n: int = 1000
    data_seed: int = 0
    radius: float = 1.0
    normalize: bool = True
    holdout: float = 0.0
    out_dir: str = "run"
    run_dir: str | None = None
    out: str | None = None
    eval_on: str = "train"
    n_triplets: int = 10_000
    n_pairs: int = 10_000
    eval_seed: int = 0
    gammas: tuple = (0.01, 0.1, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        checks = [
            ("dataset", self.dataset in ("swiss_roll", "sphere"), "must be 'swiss_roll' or 'sphere'"),
            ("n", self.n >= 1, "must be >= 1"),
            ("data_seed", self.data_seed >= 0, "must be >= 0"),
            ("radius", self.radius > 0, "must be positive"),
            ("holdout", 0.0 <= self.holdout < 1.0, "must be in [0, 1)"),
            ("eval_on", self.eval_on in ("train", "holdout", "all"), "must be 'train', 'holdout' or 'all'"),
            ("n_triplets", self.n_triplets >= 1, "must be >= 1"),
            ("n_pairs", self.n_pairs >= 1, "must be >= 1"),
            ("eval_seed", self.eval_seed >= 0, "must be >= 0"),
            ("gammas", len(self.gammas) > 0 and all(np.isfinite(g) and g >= 0 for g in self.gammas),
             "must be a nonempty list of values >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}, got {getattr(self, key)!r}")

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir if self.run_dir is not None else self.out_dir)

    def to_flat(self) -> dict:
        d = {k: getattr(self, k) for k in _RUN_KEYS}
        d["gammas"] = list(self.gammas)
        d.update(self.train.to_dict())
        return d


def _coerce(key, value, from_flag):
    kind = KEY_KINDS[key]
    if value is None or (from_flag and value in ("null", "none", "None")):
        if kind.endswith("?"):
            return None
        raise ConfigError(f"{key}: null is not allowed")
    base = kind.rstrip("?")
    try:
        if base.endswith("[]"):
            item = base[:-2]
            if from_flag:
                value = [v for v in str(value).split(",") if v.strip()]
            if not isinstance(value, list):
                raise TypeError
            return [_scalar(item, v, from_flag) for v in value]
        return _scalar(base, value, from_flag)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.replace('?', ' or null')}, got {value!r}") from None


def _scalar(kind, v, from_flag):
    if from_flag:
        if kind == "bool":
            if v.lower() in ("true", "1", "yes"):
                return True
            if v.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        return {"int": int, "float": float, "str": str}[kind](v)
    if kind == "bool":
        if not isinstance(v, bool):
            raise TypeError
        return v
    if isinstance(v, bool):
        raise TypeError
    if kind == "int":
        if not isinstance(v, int):
            raise TypeError
        return v
    if kind == "float":
        if not isinstance(v, (int, float)):
            raise TypeError
        return float(v)
    if not isinstance(v, str):
        raise TypeError
    return v


def _layer(raw: dict, from_flag: bool) -> dict:
    raw = dict(raw)
    out = {}
    if "lr" in raw:
        # one learning rate for both parameter sets; the specific keys still win
        lr = _coerce("lr_theta", raw.pop("lr"), from_flag)
        out["lr_theta"] = out["lr_omega"] = lr
    unknown = sorted(set(raw) - set(KEY_KINDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for k, v in raw.items():
        out[k] = _coerce(k, v, from_flag)
    return out


def config_from_dict(d: dict) -> RunConfig:
    train_keys = {f.name for f in fields(TrainConfig)}
    tr = {k: v for k, v in d.items() if k in train_keys}
    rest = {k: v for k, v in d.items() if k not in train_keys}
    try:
        train = TrainConfig.from_dict(tr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train=train, **rest)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then flag ``overrides`` (strings)."""
    merged = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(_layer(raw, from_flag=False))
    merged.update(_layer(overrides or {}, from_flag=True))
    return config_from_dict(merged)


# ---------------------------------------------------------------------------
# pipeline pieces


def _load_cloud(cfg: RunConfig) -> PointCloud:
    if cfg.data is not None:
        if not Path(cfg.data).is_file():
            raise ConfigError(f"data: no such file {cfg.data}")
        return load_xyz(cfg.data)
    if cfg.dataset == "swiss_roll":
        return gen_swiss_roll(cfg.n, cfg.data_seed)
    return gen_sphere(cfg.n, cfg.radius, cfg.data_seed)


def _prepare(cfg: RunConfig, transform: Transform | None = None):
    """Raw cloud -> (normalized cloud, transform, train part, holdout part)."""
    raw = _load_cloud(cfg)
    if transform is None:
        if cfg.normalize:
            cloud, transform = normalize(raw)
        else:
            cloud, transform = raw, Transform(np.zeros(raw.dim), 1.0)
    else:
        if transform.center.shape != (raw.dim,):
            raise ConfigError(f"data has {raw.dim} columns but the run was trained on {len(transform.center)}")
        cloud = PointCloud(transform.apply(raw.points), raw.provenance)
    train, hold = split(cloud, cfg.holdout, cfg.data_seed)
    return cloud, transform, train, hold


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(cfg: RunConfig, command: str, out_dir: Path, status: str, outputs, error=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command,
        "version": __version__,
        "status": status,
        "seed": cfg.train.seed,
        "config": cfg.to_flat(),
        "outputs": sorted(str(p) for p in outputs),
    }
    if error is not None:
        man["error"] = error
    _write_json(out_dir / f"manifest_{command}.json", man)


def _save_run(out_dir: Path, state: TrainState, transform: Transform, history, latents=None, metrics=None):
    """Write checkpoints, log and (when given) the metric field; returns relative paths."""
    for sub in ("checkpoints", "logs", "fields"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    written = []
    for name, p in (("encoder", state.encoder), ("decoder", state.decoder), ("dual", state.dual)):
        save_checkpoint(p, out_dir / "checkpoints" / f"{name}.json")
        written.append(f"checkpoints/{name}.json")
    _write_json(out_dir / "checkpoints" / "transform.json", transform.to_dict())
    written.append("checkpoints/transform.json")
    write_training_log(out_dir / "logs" / "train_log.csv", history)
    written.append("logs/train_log.csv")
    if latents is not None:
        write_metric_field(out_dir / "fields" / "metric_field.csv", latents, metrics)
        written.append("fields/metric_field.csv")
    return written


def train_run(cfg: RunConfig, out_dir: Path, command="train") -> TrainResult:
    cloud, transform, train, _ = _prepare(cfg)
    try:
        cfg.train.resolved_batch_size(len(train))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        res = train_loop(train, cfg.train)
    except DivergenceError as exc:
        partial = []
        if exc.last_good is not None:
            partial = _save_run(out_dir, exc.last_good, transform, exc.last_good.history)
        _write_manifest(cfg, command, out_dir, "diverged (outputs hold the last good state)", partial, str(exc))
        raise
    written = _save_run(out_dir, res.state, transform, res.history, res.latents, res.metrics)
    _write_manifest(cfg, command, out_dir, "complete", written)
    return res


def _load_run(run_dir: Path):
    ck = run_dir / "checkpoints"
    try:
        enc = load_checkpoint(ck / "encoder.json")
        dual = load_checkpoint(ck / "dual.json")
        transform = Transform.from_dict(json.loads((ck / "transform.json").read_text()))
    except FileNotFoundError as exc:
        raise ConfigError(f"run directory {run_dir} has no trained model: {exc.filename}") from None
    return enc, dual, transform


def _eval_points(cfg, train, hold, cloud):
    return {"train": train, "holdout": hold, "all": cloud}[cfg.eval_on]


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out) if cfg.out is not None else Path(cfg.out_dir) / "cloud.xyz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_xyz(_load_cloud(cfg), out)
    _write_manifest(cfg, "gen", Path(cfg.out_dir), "complete", [out])
    print(f"wrote {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    res = train_run(cfg, out_dir)
    last = res.history[-1] if res.history else None
    print(f"trained {cfg.train.outer_iters} outer iterations into {out_dir}")
    if last is not None:
        print(f"final l_immersion {last.l_immersion:.6g}  l_isometry {last.l_isometry:.6g}")
    return 0


def cmd_embed(cfg: RunConfig) -> int:
    run_dir = cfg.run_path
    enc, _, transform = _load_run(run_dir)
    cloud, _, train, hold = _prepare(cfg, transform)
    pts = _eval_points(cfg, train, hold, cloud)
    z = mlp_forward(enc, pts.points)
    out = Path(cfg.out) if cfg.out is not None else run_dir / "fields" / "latents.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["index," + ",".join(f"z{i}" for i in range(z.shape[1]))]
    lines += [f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(z)]
    out.write_text("\n".join(lines) + "\n")
    _write_manifest(cfg, "embed", run_dir, "complete", [out])
    print(f"wrote {out}")
    return 0


def eval_run(cfg: RunConfig, run_dir: Path) -> EvalReport:
    enc, dual, transform = _load_run(run_dir)
    cloud, _, train, hold = _prepare(cfg, transform)
    pts = _eval_points(cfg, train, hold, cloud)
    k = cfg.train.k
    if len(pts) <= k:
        raise ConfigError(f"k={k} needs more than {len(pts)} evaluation points")
    z = mlp_forward(enc, pts.points)
    g = pullback_metrics(dual, z)
    rep = evaluate(pts, z, g, k, cfg.n_triplets, cfg.n_pairs, cfg.eval_seed)
    euclid = evaluate(pts, z, None, k, cfg.n_triplets, cfg.n_pairs, cfg.eval_seed)
    zp = pca_embed(pts, cfg.train.latent_dim)
    pca = evaluate(pts, zp, None, k, cfg.n_triplets, cfg.n_pairs, cfg.eval_seed)
    extra = {
        "distortion_euclidean_metric": euclid.distortion,
        "pca": {f: getattr(pca, f) for f in ("distortion", "triplet", "spearman", "knn_preservation")},
        "n_points": len(pts),
        "eval_on": cfg.eval_on,
    }
    rep = EvalReport(**{**rep.to_dict(), "extra": extra})
    (run_dir / "reports").mkdir(parents=True, exist_ok=True)
    rep.write_json(run_dir / "reports" / "eval.json", cfg.to_flat())
    return rep


def cmd_eval(cfg: RunConfig) -> int:
    run_dir = cfg.run_path
    rep = eval_run(cfg, run_dir)
    _write_manifest(cfg, "eval", run_dir, "complete", [run_dir / "reports" / "eval.json"])
    print(
        f"distortion {rep.distortion:.6g}  triplet {rep.triplet:.4f}  "
        f"spearman {rep.spearman:.4f}  knn_preservation {rep.knn_preservation:.4f}"
    )
    return 0


ABLATION_FIELDS = ("gamma", "final_l_is", "tail_mean_l_is", "final_l_re", "final_l_du")


def ablation_rows(results: dict) -> list[dict]:
    rows = []
    for gamma, hist in results.items():
        tail = hist[-max(1, len(hist) // 10) :]
        rows.append({
            "gamma": gamma,
            "final_l_is": hist[-1].l_is,
            "tail_mean_l_is": float(np.mean([r.l_is for r in tail])),
            "final_l_re": hist[-1].l_re,
            "final_l_du": hist[-1].l_du,
        })
    return rows


def cmd_ablate(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    if cfg.train.outer_iters < 1:
        raise ConfigError("outer_iters: ablate-dual needs at least one outer iteration")
    results = {}
    for gamma in cfg.gammas:
        sub = replace(cfg, train=replace(cfg.train, gamma=gamma))
        res = train_run(sub, out_dir / f"gamma_{gamma!r}")
        results[gamma] = res.history
    rows = ablation_rows(results)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    lines = [",".join(ABLATION_FIELDS)] + [",".join(repr(r[f]) for f in ABLATION_FIELDS) for r in rows]
    table = out_dir / "reports" / "ablation.csv"
    table.write_text("\n".join(lines) + "\n")
    _write_manifest(cfg, "ablate-dual", out_dir, "complete", [table])
    print(f"{'gamma':>10}  {'final_l_is':>14}  {'final_l_re':>14}")
    for r in rows:
        print(f"{r['gamma']:>10g}  {r['final_l_is']:>14.6e}  {r['final_l_re']:>14.6e}")
    return 0


_HANDLERS = {"gen": cmd_gen, "train": cmd_train, "embed": cmd_embed, "eval": cmd_eval, "ablate-dual": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    # bad flags are configuration errors (exit 1), not argparse's usage status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isolearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = subs.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON file with config keys")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.add_argument("--lr", dest="lr", default=argparse.SUPPRESS, help="sets lr_theta and lr_omega")
        for key, kind in KEY_KINDS.items():
            sp.add_argument(
                "--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS, metavar=kind.upper()
            )
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    ns = vars(args)
    command, path, verbose = ns.pop("command"), ns.pop("config"), ns.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(path, ns)
        return _HANDLERS[command](cfg)
    except (ConfigError, PointFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, ad.TapeError, FloatingPointError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
