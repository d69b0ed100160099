"""Command-line entry point.

Every command works inside a run directory::

    run_dir/manifest.json      config echo, seed, input hashes, artifact hashes
    run_dir/checkpoints/       encoder_smp.npz, encoder_sr.npz, model.npz, lr.npz
    run_dir/logs/              pretrain.json, finetune.json
    run_dir/reports/           predictions_<split>.jsonl, report_<split>.json / .txt

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .baselines import LrModel, ips_weights, rebalancing_sampler, train_lr
from .ehr_data import DataError, DdiGraph, EhrDataset, code_frequencies, load_dataset, load_ddi_graph, profile_groups, split_dataset
from .encoder import EncoderConfig, PatientEncoder
from .finetune import LossWeights, RecommendationModel, finetune, predict_probs
from .metrics import EvalReport, evaluate, format_table, make_predictions, save_predictions
from .pipeline import new_encoder, test_groups
from .pretrain import make_smp_head, make_sr_head, pretrain
from .synth_cohort import ConfigError, GroundTruthMap, SynthConfig, cohort_statistics, generate_cohort, write_cohort
from .training import Schedule, TrainingError, derive_seed, set_deterministic

logger = logging.getLogger("raremed")

DEFAULT_RUN_CONFIG = {
    "data": {"records": None, "vocab": None, "ddi": None},
    "output_dir": None,
    "encoder": asdict(EncoderConfig()),
    "loss": asdict(LossWeights.desk()),
    "schedule": asdict(Schedule()),
    "threshold": 0.5,
    "n_groups": 5,
    "deterministic": True,
}


class ValidationError(Exception):
    """Bad user input: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply `a.b.c=value` assignments (values parsed as JSON when possible)."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    return cfg


def read_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _dataclass_from(cls, obj: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ValidationError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {section}: {exc}") from None


class RunContext:
    """Resolved run configuration plus the loaded, split dataset."""

    def __init__(self, cfg: dict, run_dir: Path):
        self.cfg = cfg
        self.run_dir = run_dir
        self.encoder_config = _dataclass_from(EncoderConfig, cfg["encoder"], "encoder")
        self.weights = _dataclass_from(LossWeights, cfg["loss"], "loss")
        self.schedule = _dataclass_from(Schedule, cfg["schedule"], "schedule")
        self.threshold = float(cfg["threshold"])
        self.n_groups = int(cfg["n_groups"])
        paths = cfg["data"]
        for key in ("records", "vocab", "ddi"):
            if not paths.get(key):
                raise ValidationError(f"config data.{key} is required")
            if not Path(paths[key]).exists():
                raise ValidationError(f"data file not found: {paths[key]}")
        self.inputs = {k: sha256_file(paths[k]) for k in ("records", "vocab", "ddi")}
        if cfg.get("deterministic", True):
            set_deterministic(True)
            torch.set_num_threads(1)
        raw = load_dataset(paths["records"], paths["vocab"])
        self.dataset: EhrDataset = split_dataset(raw, derive_seed(self.schedule.seed, "data"))
        self.ddi: DdiGraph = load_ddi_graph(paths["ddi"], raw.vocab)
        self.vocab = raw.vocab
        self.vocab_sha = self.inputs["vocab"]
        for sub in ("checkpoints", "logs", "reports"):
            (run_dir / sub).mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_args(cls, args) -> "RunContext":
        cfg = _merge(DEFAULT_RUN_CONFIG, read_config(args.config))
        cfg = apply_overrides(cfg, args.set)
        for flag, key in (("records", "records"), ("vocab", "vocab"), ("ddi", "ddi")):
            if getattr(args, flag, None):
                cfg["data"][key] = getattr(args, flag)
        if getattr(args, "seed", None) is not None:
            cfg["schedule"]["seed"] = args.seed
        if getattr(args, "alpha", None) is not None:
            cfg["loss"]["alpha"] = args.alpha
        if getattr(args, "beta", None) is not None:
            cfg["loss"]["beta"] = args.beta
        if getattr(args, "threshold", None) is not None:
            cfg["threshold"] = args.threshold
        if getattr(args, "run_dir", None):
            cfg["output_dir"] = args.run_dir
        if not cfg.get("output_dir"):
            raise ValidationError("no run directory: pass --run-dir or set output_dir in the config")
        if cfg["schedule"].get("seed") is None:
            raise ValidationError("schedule.seed is required")
        run_dir = Path(cfg["output_dir"])
        return cls(cfg, run_dir)

    # manifest -----------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def record(self, command: str, artifacts: list[Path], **extra) -> None:
        m = self.manifest()
        if m.get("inputs") and m["inputs"] != self.inputs:
            raise ValidationError(f"{self.run_dir} was created from different input files")
        m["config"] = self.cfg
        m["seed"] = self.schedule.seed
        m["inputs"] = self.inputs
        m.setdefault("commands", {})[command] = {
            "artifacts": {str(p.relative_to(self.run_dir)): sha256_file(p) for p in artifacts},
            **extra,
        }
        m.update({k: v for k, v in extra.items() if k == "method"})
        self.manifest_path.write_text(json.dumps(m, indent=1, sort_keys=True))

    # checkpoints ----------------------------------------------------------
    def _meta(self, **extra) -> dict:
        return {
            "encoder": asdict(self.encoder_config),
            "vocab_sizes": [self.vocab.n_diseases, self.vocab.n_procedures, self.vocab.n_medications],
            "vocab_sha256": self.vocab_sha,
            **extra,
        }

    def save_encoder(self, path: Path, encoder: PatientEncoder, heads: dict) -> None:
        arrays = ckpt.module_arrays(encoder, "encoder.")
        for name, head in heads.items():
            arrays.update(ckpt.module_arrays(head, f"{name}."))
        ckpt.save_arrays(path, ckpt.ENCODER_FORMAT, arrays, self._meta(heads=sorted(heads)))

    def check_meta(self, meta: dict, path: Path) -> None:
        if meta.get("vocab_sha256") != self.vocab_sha or meta.get("vocab_sizes") != [
            self.vocab.n_diseases,
            self.vocab.n_procedures,
            self.vocab.n_medications,
        ]:
            raise ckpt.CheckpointError(f"{path}: vocabulary does not match the dataset")
        if "encoder" in meta and meta["encoder"] != asdict(self.encoder_config):
            raise ckpt.CheckpointError(f"{path}: encoder config {meta['encoder']} does not match run config")

    def load_encoder(self, path: Path) -> PatientEncoder:
        arrays, meta = ckpt.load_arrays(path, ckpt.ENCODER_FORMAT)
        self.check_meta(meta, path)
        enc = PatientEncoder(self.vocab, self.encoder_config)
        ckpt.load_module(enc, arrays, "encoder.")
        return enc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1))


def cmd_synth(args) -> int:
    cfg = read_config(args.config)
    cfg = cfg.get("synth", cfg)
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        synth = SynthConfig.from_dict(cfg)
    except (ConfigError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ValidationError(f"output directory {out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    dataset, ddi, truth = generate_cohort(synth)
    paths = write_cohort(out, dataset, ddi, truth)
    manifest = {
        "command": "synth",
        "config": asdict(synth),
        "statistics": cohort_statistics(dataset).to_json(),
        "files": {name: {"path": p.name, "sha256": sha256_file(p)} for name, p in paths.items()},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(dataset)} records to {out}")
    return 0


def cmd_stats(args) -> int:
    dataset = load_dataset(args.records, args.vocab)
    print(json.dumps(cohort_statistics(dataset).to_json(), indent=1))
    return 0


def cmd_pretrain(args) -> int:
    ctx = RunContext.from_args(args)
    sched = ctx.schedule
    if args.smp_epochs is not None:
        sched.smp_epochs = args.smp_epochs
    if args.sr_epochs is not None:
        sched.sr_epochs = args.sr_epochs
    ctx.cfg["schedule"] = asdict(sched)
    ds = ctx.dataset
    encoder = new_encoder(ds, ctx.encoder_config, sched.seed)
    torch.manual_seed(derive_seed(sched.seed, "init/heads"))
    smp_head = make_smp_head(ctx.encoder_config.embed_dim)
    sr_head = make_sr_head(ctx.encoder_config.embed_dim, ctx.vocab)
    cdir = ctx.run_dir / "checkpoints"

    smp_only = Schedule(**{**asdict(sched), "sr_epochs": 0})
    res = pretrain(ds.split("train"), encoder, ctx.vocab, smp_only, val=ds.split("val"), smp_head=smp_head, sr_head=sr_head)
    ctx.save_encoder(cdir / "encoder_smp.npz", res.encoder, {"smp_head": res.smp_head})
    sr_only = Schedule(**{**asdict(sched), "smp_epochs": 0})
    res2 = pretrain(ds.split("train"), res.encoder, ctx.vocab, sr_only, val=ds.split("val"), smp_head=smp_head, sr_head=sr_head)
    ctx.save_encoder(cdir / "encoder_sr.npz", res2.encoder, {"smp_head": res2.smp_head, "sr_head": res2.sr_head})

    log_path = ctx.run_dir / "logs" / "pretrain.json"
    _write_json(log_path, res.log + res2.log)
    ctx.record("pretrain", [cdir / "encoder_smp.npz", cdir / "encoder_sr.npz", log_path])
    print(f"pretraining done: {cdir / 'encoder_sr.npz'}")
    return 0


def cmd_finetune(args) -> int:
    ctx = RunContext.from_args(args)
    sched = ctx.schedule
    if args.epochs is not None:
        sched.finetune_epochs = args.epochs
        ctx.cfg["schedule"] = asdict(sched)
    ds = ctx.dataset
    train = ds.split("train")
    from_scratch = args.from_scratch or args.rebalance
    if from_scratch:
        encoder = new_encoder(ds, ctx.encoder_config, sched.seed)
        method = "rebalancing" if args.rebalance else "raremed-no-pretrain"
    else:
        path = Path(args.pretrained) if args.pretrained else ctx.run_dir / "checkpoints" / "encoder_sr.npz"
        if not path.exists():
            raise ValidationError(f"pretrained checkpoint not found: {path} (run pretrain or pass --from-scratch)")
        encoder = ctx.load_encoder(path)
        method = "raremed"
    sampler = None
    if args.rebalance:
        sampler = rebalancing_sampler(train, ips_weights(train, code_frequencies(ds, "train")), sched.seed)
    torch.manual_seed(derive_seed(sched.seed, "init/head"))
    res = finetune(encoder, train, ds.split("val"), ctx.ddi, ctx.vocab, sched, ctx.weights, ctx.threshold, sampler=sampler)

    model_path = ctx.run_dir / "checkpoints" / "model.npz"
    ckpt.save_arrays(
        model_path,
        ckpt.MODEL_FORMAT,
        ckpt.module_arrays(res.model),
        ctx._meta(method=method, loss=asdict(ctx.weights), best_epoch=res.best_epoch),
    )
    log_path = ctx.run_dir / "logs" / "finetune.json"
    _write_json(log_path, res.curve)
    ctx.record("finetune", [model_path, log_path], method=method)
    print(f"fine-tuned ({method}); best epoch {res.best_epoch}, val Jaccard {res.best_val_jaccard:.4f}")
    return 0


def cmd_train_lr(args) -> int:
    ctx = RunContext.from_args(args)
    ds = ctx.dataset
    res = train_lr(ds.split("train"), ctx.vocab, ctx.schedule, val=ds.split("val"), epochs=args.epochs, threshold=ctx.threshold)
    path = ctx.run_dir / "checkpoints" / "lr.npz"
    ckpt.save_arrays(path, ckpt.LR_FORMAT, ckpt.module_arrays(res.model), ctx._meta(method="lr", best_epoch=res.best_epoch))
    log_path = ctx.run_dir / "logs" / "finetune.json"
    _write_json(log_path, res.curve)
    ctx.record("train-lr", [path, log_path], method="lr")
    print(f"logistic regression trained; best epoch {res.best_epoch}")
    return 0


def _load_predictor(ctx: RunContext, path: Path):
    arrays, meta = ckpt.load_arrays(path, (ckpt.MODEL_FORMAT, ckpt.LR_FORMAT))
    ctx.check_meta(meta, path)
    if meta["format"] == ckpt.LR_FORMAT:
        model = LrModel(ctx.vocab)
        ckpt.load_module(model, arrays)
        return lambda recs: model.predict_probs(recs, ctx.vocab)
    model = RecommendationModel(PatientEncoder(ctx.vocab, ctx.encoder_config), ctx.vocab.n_medications)
    ckpt.load_module(model, arrays)
    return lambda recs: predict_probs(model, recs, ctx.vocab)


def _oracle_predictor(ctx: RunContext, path: Path):
    """Probability 1 on the ground-truth medication image, 0 elsewhere."""
    if not path.exists():
        raise ValidationError(f"ground-truth file not found: {path}")
    truth = GroundTruthMap.from_json(json.loads(path.read_text()))
    if len(truth.disease_meds) != ctx.vocab.n_diseases or len(truth.procedure_meds) != ctx.vocab.n_procedures:
        raise ValidationError(f"{path} does not match the vocabulary")
    m = ctx.vocab.n_medications
    return lambda recs: np.stack([truth.clean_meds(r.disease_seq, r.procedure_seq, m) for r in recs]).astype(np.float64)


def cmd_evaluate(args) -> int:
    ctx = RunContext.from_args(args)
    if args.oracle:
        path = Path(args.oracle)
        predictor = _oracle_predictor(ctx, path)
        method = "oracle"
    else:
        if args.model:
            path = Path(args.model)
        else:
            candidates = [ctx.run_dir / "checkpoints" / n for n in ("model.npz", "lr.npz")]
            path = next((p for p in candidates if p.exists()), candidates[0])
        if not path.exists():
            raise ValidationError(f"model checkpoint not found: {path}")
        predictor = _load_predictor(ctx, path)
        method = ctx.manifest().get("method", path.stem)
    records = ctx.dataset.split(args.split)
    probs = predictor(records)
    preds = make_predictions([r.patient_id for r in records], probs, ctx.threshold)
    groups = test_groups(ctx.dataset, args.split, ctx.n_groups)
    report = evaluate(preds, records, ctx.ddi, groups)

    rdir = ctx.run_dir / "reports"
    pred_path = rdir / f"predictions_{args.split}.jsonl"
    save_predictions(pred_path, preds)
    rep_path = rdir / f"report_{args.split}.json"
    _write_json(rep_path, report.to_json())
    table = format_table({method: report}, ctx.n_groups)
    txt_path = rdir / f"report_{args.split}.txt"
    txt_path.write_text(table)
    ctx.record(f"evaluate:{args.split}", [pred_path, rep_path, txt_path])
    print(table, end="")
    return 0


def cmd_compare(args) -> int:
    rows: dict[str, EvalReport | None] = {}
    inputs = None
    for run in args.runs:
        run_dir = Path(run)
        manifest_path = run_dir / "manifest.json"
        rep_path = run_dir / "reports" / f"report_{args.split}.json"
        if not manifest_path.exists() or not rep_path.exists():
            logger.warning("run %s has no %s report; row left empty", run_dir, args.split)
            rows[run_dir.name] = None
            continue
        manifest = json.loads(manifest_path.read_text())
        if inputs is None:
            inputs = manifest["inputs"]
        elif manifest["inputs"] != inputs:
            raise ValidationError(f"run {run_dir} used different input data than the other runs")
        name = manifest.get("method", run_dir.name)
        if name in rows:
            name = f"{name} ({run_dir.name})"
        rows[name] = EvalReport.from_json(json.loads(rep_path.read_text()))
    n_groups = max((len(r.per_group_jaccard) for r in rows.values() if r is not None), default=5)
    table = format_table(rows, n_groups)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return 0


def cmd_profile(args) -> int:
    ctx = RunContext.from_args(args)
    freqs = code_frequencies(ctx.dataset, "train")
    prof = profile_groups(ctx.dataset, freqs, args.n_groups)
    out = [asdict(p) for p in prof]
    path = ctx.run_dir / "reports" / "profile.json"
    _write_json(path, out)
    ctx.record("profile", [path])
    for p in prof:
        if p.empty:
            print(f"G{p.group:<3d} [{p.lower:8.1f}, {p.upper:8.1f})  empty")
        else:
            print(
                f"G{p.group:<3d} [{p.lower:8.1f}, {p.upper:8.1f})  n={p.n_patients:<5d} dis={p.mean_diseases:.2f} "
                f"proc={p.mean_procedures:.2f} med={p.mean_medications:.2f} med_pop={p.mean_med_popularity:.1f}"
            )
    return 0


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--run-dir", help="run directory (overrides output_dir)")
    p.add_argument("--records")
    p.add_argument("--vocab")
    p.add_argument("--ddi")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. schedule.lr=3e-3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="raremed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="JSON file with synth settings (top level or under 'synth')")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="cohort statistics of a record file")
    p.add_argument("--records", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="SMP then SR pretraining")
    _add_run_args(p)
    p.add_argument("--smp-epochs", type=int)
    p.add_argument("--sr-epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the medication head and encoder")
    _add_run_args(p)
    p.add_argument("--pretrained", help="encoder checkpoint (default: run_dir/checkpoints/encoder_sr.npz)")
    p.add_argument("--from-scratch", action="store_true", help="skip pretraining (w/o P ablation)")
    p.add_argument("--rebalance", action="store_true", help="IPS rebalanced sampling, from scratch")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-lr", help="logistic regression baseline")
    _add_run_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_train_lr)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_run_args(p)
    p.add_argument("--model", help="model checkpoint (default: run_dir/checkpoints/model.npz or lr.npz)")
    p.add_argument("--oracle", metavar="GROUND_TRUTH", help="score the generator's ground-truth map instead of a model")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side table of evaluated runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("profile", help="rarest-disease popularity profile")
    _add_run_args(p)
    p.add_argument("--n-groups", type=int, default=13)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, DataError, ConfigError, ckpt.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
