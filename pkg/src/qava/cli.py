"""Command-line entry point: dataset, train, attack, eval, transfer, report.

Every subcommand accepts ``--config FILE`` (JSON, keys as in the flag names
with dashes turned into underscores); explicit flags override the file.
Relative output paths land under ``$QAVA_RUN_DIR`` (default ``runs``).

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path
from typing import Any

import jsonschema
import torch

from . import attacks, evalkit, questions, toyvlm
from .losses import LossSpec
from .numcore import ContractError, RngStream, load_qtns, qtns_dumps, save_qtns

log = logging.getLogger("qava")

LOSS_NAMES = {"qava": "qava", "qava-multilayer": "qava_multilayer", "llm": "llm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------ options

# name -> (json type, default, help, extra argparse kwargs)
OPTIONS: dict[str, dict[str, tuple]] = {
    "dataset": {
        "mode": ("string", "synth", "synth: render a new corpus; subset: draw m images x n questions from --source", {"choices": ["synth", "subset"]}),
        "images": ("integer", 32, "number of images (m)", {}),
        "questions": ("integer", 50, "questions per image (n)", {}),
        "seed": ("integer", 1, "generator seed", {}),
        "prefix": ("string", "syn", "image id prefix", {}),
        "source": (["string", "null"], None, "corpus directory to subset", {}),
        "out": ("string", "dataset", "output directory", {}),
    },
    "train": {
        "corpus": (["string", "null"], None, "training corpus; omitted means render one", {}),
        "images": ("integer", 2000, "images to render when no corpus is given", {}),
        "questions": ("integer", 24, "questions per rendered image", {}),
        "data_seed": ("integer", 100, "seed for the rendered corpus", {}),
        "seed": ("integer", 0, "training seed", {}),
        "epochs": ("integer", 16, "maximum epochs", {}),
        "min_epochs": ("integer", 10, "epochs before early stopping may trigger", {}),
        "lr": ("number", 5e-4, "peak learning rate", {}),
        "batch_size": ("integer", 64, "minibatch size", {}),
        "target": ("number", 90.0, "required held-out accuracy (percent)", {}),
        "name": (["string", "null"], None, "checkpoint label", {}),
        "out": ("string", "checkpoint", "output directory", {}),
    },
    "attack": {
        "checkpoint": ("string", None, "model checkpoint directory", {}),
        "corpus": ("string", None, "corpus with the images to attack", {}),
        "pool": (["string", "null"], None, "surrogate question pool (JSONL); default: the corpus questions", {}),
        "loss": ("string", "qava", "attack objective", {"choices": list(LOSS_NAMES)}),
        "strategy": ("string", "rsq", "surrogate question strategy", {"choices": list(questions.STRATEGIES)}),
        "n_questions": ("integer", 10, "surrogate questions per image (N)", {}),
        "method": ("string", "pgd", "optimizer", {"choices": list(attacks.METHODS)}),
        "eps": ("number", 8.0, "l-inf budget in 1/255 units", {}),
        "alpha": (["number", "null"], None, "step size in 1/255 units (pgd 2, cw 2.55)", {}),
        "steps": (["integer", "null"], None, "iterations (pgd 20, cw 50, fgsm 1)", {}),
        "c": (["number", "null"], None, "cw penalty constant (default per loss)", {}),
        "confidence": ("number", 0.0, "cw confidence", {}),
        "random_init": ("boolean", True, "uniform start inside the eps ball (pgd, cw)", {}),
        "sga": ("boolean", False, "resample surrogate questions at every step", {}),
        "momentum": ("number", 0.0, "momentum factor m (0 disables)", {}),
        "di": ("number", 0.0, "diverse-input probability", {}),
        "per_image": ("boolean", True, "draw surrogate questions per image (else one draw shared by all images)", {}),
        "seed": ("integer", 0, "attack seed", {}),
        "repeats": ("integer", 3, "independent repeats (fresh question draws)", {}),
        "jobs": ("integer", 1, "parallel worker processes", {}),
        "out": ("string", "attack", "output directory", {}),
    },
    "eval": {
        "checkpoint": ("string", None, "model checkpoint directory", {}),
        "corpus": ("string", None, "evaluation corpus", {}),
        "adv": (["string", "null"], None, "attack run directory", {}),
        "noise": ("boolean", False, "also score uniform noise at the attack budget", {}),
        "eps": (["number", "null"], None, "noise budget in 1/255 units when no attack run is given", {}),
        "seed": ("integer", 0, "noise seed", {}),
        "repeats": (["integer", "null"], None, "noise repeats (default: attack repeats or 3)", {}),
        "out": ("string", "eval", "output directory", {}),
    },
    "transfer": {
        "checkpoints": ("array", None, "checkpoint directories (surrogates and targets)", {"nargs": "+"}),
        "adv": ("array", None, "attack run per checkpoint, same order", {"nargs": "+"}),
        "corpus": ("string", None, "evaluation corpus", {}),
        "out": ("string", "transfer", "output directory", {}),
    },
    "report": {
        "run": ("string", None, "run directory to summarize", {}),
        "out": (["string", "null"], None, "where to write report files (default: the run directory)", {}),
    },
}
REQUIRED = {
    "attack": ("checkpoint", "corpus"),
    "eval": ("checkpoint", "corpus"),
    "transfer": ("checkpoints", "adv", "corpus"),
    "report": ("run",),
}


def schema_for(command: str) -> dict:
    props = {}
    for name, (jtype, _default, _help, extra) in OPTIONS[command].items():
        if jtype == "array":
            props[name] = {"type": "array", "items": {"type": "string"}}
        else:
            props[name] = {"type": jtype}
        if "choices" in extra:
            props[name]["enum"] = list(extra["choices"])
    return {"type": "object", "properties": props, "additionalProperties": False}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_PY_TYPES = {"integer": int, "number": float, "string": str}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qava", description="Query-agnostic visual attacks on a toy VLM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, opts in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="JSON file of option values")
        for name, (jtype, default, help_text, extra) in opts.items():
            flag = "--" + name.replace("_", "-")
            base = jtype[0] if isinstance(jtype, list) else jtype
            kw: dict[str, Any] = {"dest": name, "default": argparse.SUPPRESS,
                                  "help": f"{help_text} (default: {default})"}
            if command == "dataset" and name == "mode":
                p.add_argument("mode", nargs="?", default=None,
                               choices=extra["choices"], help=help_text)
                continue
            if command == "report" and name == "run":
                p.add_argument("run", nargs="?", default=None, help=help_text)
                continue
            if base == "boolean":
                kw.update(type=_bool, nargs="?", const=True, metavar="BOOL")
                p.add_argument(flag, **kw)
                p.add_argument("--no-" + name.replace("_", "-"), dest=name,
                               action="store_false", default=argparse.SUPPRESS,
                               help=f"disable {flag}")
                continue
            if base != "array":
                kw["type"] = _PY_TYPES[base]
            kw.update(extra)
            p.add_argument(flag, **kw)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: v[1] for k, v in OPTIONS[command].items()}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        try:
            jsonschema.validate(loaded, schema_for(command))
        except jsonschema.ValidationError as e:
            raise UsageError(f"invalid config {args.config}: {e.message}") from e
        cfg.update(loaded)
    for name in OPTIONS[command]:
        # unset positionals come back as None
        if getattr(args, name, None) is not None:
            cfg[name] = getattr(args, name)
    try:
        jsonschema.validate(cfg, schema_for(command))
    except jsonschema.ValidationError as e:
        raise UsageError(f"invalid option: {e.message}") from e
    for name in REQUIRED.get(command, ()):
        if cfg.get(name) in (None, []):
            raise UsageError(f"{command}: --{name.replace('_', '-')} is required")
    return cfg


# ------------------------------------------------------------- paths


def run_root() -> Path:
    return Path(os.environ.get("QAVA_RUN_DIR", "runs"))


def out_path(p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else run_root() / path


def in_path(p: str) -> Path:
    path = Path(p)
    if path.is_absolute() or path.exists():
        return path
    return run_root() / path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _positive(cfg: dict, *names: str) -> None:
    for n in names:
        if cfg[n] is not None and cfg[n] < 1:
            raise UsageError(f"--{n.replace('_', '-')} must be >= 1, got {cfg[n]}")


# ----------------------------------------------------------- commands


def cmd_dataset(cfg: dict) -> dict:
    _positive(cfg, "images", "questions")
    out = out_path(cfg["out"])
    if cfg["mode"] == "synth":
        records = evalkit.gen_synthetic(RngStream(cfg["seed"]), cfg["images"],
                                        cfg["questions"], prefix=cfg["prefix"])
    else:
        if not cfg["source"]:
            raise UsageError("dataset subset needs --source")
        source = evalkit.load_corpus(in_path(cfg["source"]))
        spec = evalkit.DatasetSpec(cfg["images"], cfg["questions"], cfg["seed"])
        records = evalkit.build_subset(source, spec, RngStream(cfg["seed"]))
    manifest = evalkit.save_corpus(records, out, meta={"config": cfg})
    log.info("wrote %d records over %d images to %s", manifest["records"], manifest["images"], out)
    return manifest


def cmd_train(cfg: dict) -> dict:
    _positive(cfg, "images", "questions", "epochs", "batch_size")
    if cfg["corpus"]:
        records = evalkit.load_corpus(in_path(cfg["corpus"]))
    else:
        records = evalkit.gen_synthetic(RngStream(cfg["data_seed"]), cfg["images"],
                                        cfg["questions"], prefix="train")
    tcfg = toyvlm.TrainConfig(epochs=cfg["epochs"], min_epochs=cfg["min_epochs"],
                              lr=cfg["lr"], batch_size=cfg["batch_size"],
                              target_accuracy=cfg["target"])
    out = out_path(cfg["out"])
    model, metrics = toyvlm.train_toy(records, tcfg, RngStream(cfg["seed"]))
    toyvlm.save_checkpoint(model, out, name=cfg["name"] or out.name,
                           extra={"config_echo": cfg,
                                  "corpus_checksum": evalkit.corpus_checksum(records)})
    log.info("held-out accuracy %.2f after %d epochs", metrics["heldout_accuracy"], metrics["epochs"])
    return metrics


def _attack_config(cfg: dict) -> attacks.AttackConfig:
    over = {"eps": cfg["eps"] / 255.0, "random_init": cfg["random_init"],
            "confidence": cfg["confidence"], "momentum": cfg["momentum"],
            "di_prob": cfg["di"], "seed": cfg["seed"], "c": cfg["c"]}
    if cfg["alpha"] is not None:
        over["alpha"] = cfg["alpha"] / 255.0
    if cfg["steps"] is not None:
        over["steps"] = cfg["steps"]
    if cfg["sga"]:
        over["sga"] = attacks.SgaConfig(batch_size=cfg["n_questions"])
    if cfg["method"] == "fgsm":
        over["random_init"] = False
    return attacks.AttackConfig.for_method(cfg["method"], **over)


def surrogate_pool(pool: questions.QuestionPool, held_out_texts: set[str]) -> questions.QuestionPool:
    """Pool questions whose text is not among the evaluation questions, one per text."""
    seen: set[str] = set()
    keep = []
    for q in sorted(pool, key=lambda q: q.question_id):
        if q.text in held_out_texts or q.text in seen:
            continue
        seen.add(q.text)
        keep.append(q)
    return questions.QuestionPool(keep)


def question_source(strategy: str, n: int, model, image, image_id: str,
                    targets, pool: questions.QuestionPool):
    if strategy == "wtq":
        return questions.wtq(targets)
    if strategy == "vqg":
        return toyvlm.generate_questions(model, image, n, image_id)
    if strategy == "rsq":
        return lambda rng: questions.sample_rsq(pool, n, rng)
    return lambda rng: questions.sample_rsq_by_type(pool, n, rng)


_WORKER: dict = {}


def _worker_setup(cfg: dict) -> None:
    torch.set_num_threads(1)
    # f64 keeps the l-inf projection exact to well below 1e-9
    model = toyvlm.load_checkpoint(in_path(cfg["checkpoint"]), dtype=torch.float64)
    records = evalkit.load_corpus(in_path(cfg["corpus"]))
    if cfg["pool"]:
        pool = questions.load_pool(in_path(cfg["pool"]))
    else:
        pool = questions.QuestionPool(r.question for r in records)
    _WORKER.update(cfg=cfg, model=model, groups=evalkit.group_by_image(records), pool=pool)


def _attack_job(task: tuple[int, int, str]) -> tuple[int, int, str, bytes, dict, float]:
    rep, index, image_id = task
    cfg, model = _WORKER["cfg"], _WORKER["model"]
    recs = _WORKER["groups"][image_id]
    image = recs[0].image
    targets = [r.question for r in recs]
    pool = surrogate_pool(_WORKER["pool"], {q.text for q in targets})
    base = RngStream(cfg["seed"]).fork(rep)
    rng = base.fork(index) if cfg["per_image"] else base.fork(0)
    source = question_source(cfg["strategy"], cfg["n_questions"], model, image,
                             image_id, targets, pool)
    if callable(source) and not cfg["per_image"] and not cfg["sga"]:
        # one shared sampling stream for every image of the repeat
        source = list(source(base.fork(10**6)))
    spec = LossSpec(LOSS_NAMES[cfg["loss"]], confidence=cfg["confidence"])
    ex = attacks.run_attack(model, spec, image, source, _attack_config(cfg), rng)
    side = {"image_id": image_id, "repeat": rep, **ex.sidecar()}
    return rep, index, image_id, qtns_dumps(ex.adversarial), side, ex.wall_time


def cmd_attack(cfg: dict) -> dict:
    _positive(cfg, "n_questions", "repeats", "jobs")
    if cfg["eps"] < 0:
        raise UsageError("--eps must be >= 0")
    for k in ("alpha", "steps", "c"):
        if cfg[k] is not None and cfg[k] < 0:
            raise UsageError(f"--{k} must be >= 0")
    try:
        _attack_config(cfg)
    except ContractError as e:
        raise UsageError(str(e)) from e
    ckpt, corpus = in_path(cfg["checkpoint"]), in_path(cfg["corpus"])
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    if not (corpus / "manifest.json").exists():
        raise FileNotFoundError(f"no corpus at {corpus}")
    out = out_path(cfg["out"])
    _worker_setup(cfg)
    groups = _WORKER["groups"]
    ids = list(groups)
    tasks = [(rep, i, image_id) for rep in range(cfg["repeats"]) for i, image_id in enumerate(ids)]
    if cfg["jobs"] == 1:
        results = [_attack_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(cfg["jobs"], mp_context=get_context("spawn"),
                                 initializer=_worker_setup, initargs=(cfg,)) as pool:
            results = list(pool.map(_attack_job, tasks))
    results.sort(key=lambda r: (r[0], r[1]))
    (out / "clean").mkdir(parents=True, exist_ok=True)
    for image_id in ids:
        save_qtns(out / "clean" / f"{image_id}.qtns", groups[image_id][0].image)
    timing = []
    totals: dict[int, dict] = {}
    for rep, _, image_id, blob, side, wall in results:
        rep_dir = out / f"rep-{rep}"
        (rep_dir / "adv").mkdir(parents=True, exist_ok=True)
        (rep_dir / "adv" / f"{image_id}.qtns").write_bytes(blob)
        _write_json(rep_dir / "sidecars" / f"{image_id}.json", side)
        t = totals.setdefault(rep, {"images": 0, "counters": {}, "max_linf": 0.0, "mean_final_loss": 0.0})
        t["images"] += 1
        t["max_linf"] = max(t["max_linf"], side["linf"])
        t["mean_final_loss"] += side["final_loss"]
        for k, v in side["counters"].items():
            t["counters"][k] = t["counters"].get(k, 0) + v
        timing.append(f"{rep}\t{image_id}\t{wall:.6f}")
    for rep, t in totals.items():
        t["mean_final_loss"] /= t["images"]
        _write_json(out / f"rep-{rep}" / "summary.json", t)
    manifest = {
        "command": "attack",
        "config": cfg,
        "attack_config": _attack_config(cfg).to_json(),
        "checkpoint": _WORKER["model"].manifest.get("name"),
        "images": ids,
        "repeats": cfg["repeats"],
    }
    _write_json(out / "manifest.json", manifest)
    # wall times vary run to run, so they stay out of the deterministic outputs
    (out / "timing.log").write_text("repeat\timage\twall_seconds\n" + "\n".join(timing) + "\n")
    log.info("attacked %d images x %d repeats into %s", len(ids), cfg["repeats"], out)
    return {"out": str(out), "summaries": totals}


def load_adversarial(run: Path, rep: int, images: list[str] | None = None) -> dict[str, torch.Tensor | None]:
    """Adversarial tensors of one repeat. Ids listed in ``images`` but absent
    on disk map to None, which the evaluator rejects."""
    adv_dir = run / f"rep-{rep}" / "adv"
    if not adv_dir.is_dir():
        raise FileNotFoundError(f"no adversarial images in {adv_dir}")
    found = {p.stem: load_qtns(p) for p in sorted(adv_dir.glob("*.qtns"))}
    for image_id in images or []:
        found.setdefault(image_id, None)
    return found


def _fmt(mean: float | None, spread: float | None = None) -> str:
    if mean is None:
        return "-"
    if spread is None:
        return f"{mean:.2f}"
    return f"{mean:.2f} (±{spread:.2f})"


COLUMNS = ("Overall", "Other", "Number", "Yes/No")


def _aggregate(results: list[evalkit.EvalResult]) -> dict:
    cols = list(zip(*(r.row() for r in results)))
    mean, spread = [], []
    for col in cols:
        if any(v is None for v in col):
            mean.append(None)
            spread.append(None)
        else:
            m, s = evalkit.mean_spread(col)
            mean.append(m)
            spread.append(s)
    return {"runs": [dict(zip(COLUMNS, r.row())) for r in results],
            "mean": dict(zip(COLUMNS, mean)), "spread": dict(zip(COLUMNS, spread))}


def _table(rows: list[tuple[str, dict]]) -> str:
    lines = ["| Condition | " + " | ".join(COLUMNS) + " |",
             "|---" * (len(COLUMNS) + 1) + "|"]
    for name, agg in rows:
        multi = len(agg["runs"]) > 1
        cells = [_fmt(agg["mean"][c], agg["spread"][c] if multi else None) for c in COLUMNS]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: dict) -> dict:
    model = toyvlm.load_checkpoint(in_path(cfg["checkpoint"]))
    records = evalkit.load_corpus(in_path(cfg["corpus"]))
    out = out_path(cfg["out"])
    clean = evalkit.evaluate(model, records)
    rows = [("clean", _aggregate([clean]))]
    report: dict[str, Any] = {"config": cfg, "clean": clean.to_json()}
    eps = None if cfg["eps"] is None else cfg["eps"] / 255.0
    repeats = cfg["repeats"]
    if cfg["adv"]:
        run = in_path(cfg["adv"])
        if not (run / "manifest.json").exists():
            raise FileNotFoundError(f"no attack run at {run}")
        amanifest = json.loads((run / "manifest.json").read_text())
        n_rep = amanifest["repeats"]
        results = [evalkit.evaluate(model, records, load_adversarial(run, r, amanifest["images"]))
                   for r in range(n_rep)]
        agg = _aggregate(results)
        ac = amanifest["config"]
        label = f"{ac['loss']} {ac['strategy']} N={ac['n_questions']} {ac['method']}"
        rows.append((label, agg))
        report["adversarial"] = {"label": label, "attack_config": amanifest["attack_config"],
                                 **agg, "per_record": [r.per_record for r in results]}
        eps = amanifest["attack_config"]["eps"] if eps is None else eps
        repeats = repeats or n_rep
    if cfg["noise"]:
        if eps is None:
            raise UsageError("--noise needs --eps or --adv")
        repeats = repeats or 3
        images = evalkit.images_of(records)
        results = []
        for rep in range(repeats):
            base = RngStream(cfg["seed"]).fork(rep)
            noisy = {k: evalkit.noise_baseline(img, eps, base.fork(i))
                     for i, (k, img) in enumerate(images.items())}
            results.append(evalkit.evaluate(model, records, noisy))
        agg = _aggregate(results)
        rows.append((f"noise eps={eps * 255:.0f}/255", agg))
        report["noise"] = {"eps": eps, **agg}
    report["table"] = _table(rows)
    _write_json(out / "eval.json", report)
    (out / "table.md").write_text(report["table"])
    print(report["table"], end="")
    return report


def cmd_transfer(cfg: dict) -> dict:
    ckpts, advs = cfg["checkpoints"], cfg["adv"]
    if len(ckpts) != len(advs):
        raise UsageError("--checkpoints and --adv need the same number of entries")
    records = evalkit.load_corpus(in_path(cfg["corpus"]))
    models, sets = {}, {}
    for c, a in zip(ckpts, advs):
        m = toyvlm.load_checkpoint(in_path(c))
        label = m.manifest.get("name") or Path(c).name
        if label in models:
            raise UsageError(f"duplicate checkpoint label {label!r}")
        models[label] = m
        run = in_path(a)
        if not (run / "manifest.json").exists():
            raise FileNotFoundError(f"no attack run at {run}")
        sets[label] = load_adversarial(run, 0, json.loads((run / "manifest.json").read_text())["images"])
    grid = evalkit.transfer_matrix(models, sets, records)
    out = out_path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid.to_csv())
    _write_json(out / "grid.json", {"config": cfg, **grid.to_json()})
    print(grid.to_csv(), end="")
    return grid.to_json()


def _efficiency(run: Path) -> list[str]:
    rows = []
    for manifest in sorted(run.rglob("manifest.json")):
        m = json.loads(manifest.read_text())
        if m.get("command") != "attack":
            continue
        d = manifest.parent
        wall = 0.0
        timing = d / "timing.log"
        if timing.exists():
            for line in timing.read_text().splitlines()[1:]:
                if line.strip():
                    wall += float(line.split("\t")[2])
        counters: dict[str, int] = {}
        for s in sorted(d.glob("rep-*/summary.json")):
            for k, v in json.loads(s.read_text())["counters"].items():
                counters[k] = counters.get(k, 0) + v
        c = m["config"]
        rows.append(
            f"| {c['loss']} {c['strategy']} {c['method']} | {wall:.2f} | "
            f"{counters.get('align_forward', 0)} | {counters.get('align_backward', 0)} | "
            f"{counters.get('decoder_forward', 0)} | {counters.get('decoder_backward', 0)} |"
        )
    return rows


def cmd_report(cfg: dict) -> dict:
    run = in_path(cfg["run"])
    if not run.is_dir():
        raise FileNotFoundError(f"no run directory {run}")
    evals = sorted(run.rglob("eval.json"))
    eff = _efficiency(run)
    if not evals and not eff:
        raise FileNotFoundError(f"nothing to report in {run}")
    md = ["# Results", ""]
    csv_lines = ["source,condition," + ",".join(COLUMNS)]
    for path in evals:
        e = json.loads(path.read_text())
        md += [f"## {path.parent.relative_to(run) if path.parent != run else '.'}", "", e["table"]]
        conds = [("clean", {"mean": dict(zip(COLUMNS, [e["clean"]["overall"], e["clean"]["other"],
                                                       e["clean"]["number"], e["clean"]["yes/no"]]))})]
        if "adversarial" in e:
            conds.append((e["adversarial"]["label"], e["adversarial"]))
        if "noise" in e:
            conds.append(("noise", e["noise"]))
        for name, agg in conds:
            vals = ["" if agg["mean"][c] is None else f"{agg['mean'][c]:.4f}" for c in COLUMNS]
            csv_lines.append(f"{path.parent.name},{name}," + ",".join(vals))
    if eff:
        md += ["## Efficiency", "",
               "| Attack | Wall time (s) | Align fwd | Align bwd | Decoder fwd | Decoder bwd |",
               "|---|---|---|---|---|---|", *eff, ""]
    out = out_path(cfg["out"]) if cfg["out"] else run
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(md)
    (out / "report.md").write_text(text)
    (out / "report.csv").write_text("\n".join(csv_lines) + "\n")
    print(text)
    return {"evals": len(evals), "attacks": len(eff)}


COMMANDS = {
    "dataset": cmd_dataset, "train": cmd_train, "attack": cmd_attack,
    "eval": cmd_eval, "transfer": cmd_transfer, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (ContractError, toyvlm.TrainingError, FileNotFoundError, OSError,
            questions.PoolFormatError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
