"""Batch pipeline: preprocess -> train -> predict -> evaluate -> ensemble -> submit.

Stages communicate only through files, so each is independently runnable and
a rerun on unchanged inputs is byte-identical.  Every stage writes a manifest
listing its inputs and outputs with content hashes; the run id is derived
from those hashes, never from wall-clock time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, corpus, ensemble, metrics, trainer
from .corpus import Instance, PairID, ParseError, VAScore, format_va, parse_va
from .encoding import EncoderSpec
from .metrics import Prediction

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# canonical file I/O

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, stage: str, params: dict,
                   inputs: dict[str, str], outputs: list[Path]) -> None:
    """Manifest with relative paths only, so reruns into fresh dirs match."""
    out_hashes = {str(p.relative_to(out_dir)): sha256_file(p)
                  for p in sorted(outputs)}
    body = {"stage": stage, "tool_version": __version__, "params": params,
            "inputs": inputs, "outputs": out_hashes}
    digest = hashlib.sha256(
        canonical_json(body).encode("utf-8")).hexdigest()[:16]
    write_json(out_dir / MANIFEST_NAME, {"run_id": digest, **body})


# ---------------------------------------------------------------------------
# instance / prediction files

def instance_rows(instances: list[Instance]) -> list[dict]:
    rows = []
    for inst in instances:
        row = {"ID": inst.id, "Text": inst.text, "Aspect": inst.aspect,
               "Pair": str(inst.pair)}
        if inst.gold is not None:
            row["VA"] = format_va(inst.gold)
        rows.append(row)
    return rows


def load_instances(path: Path) -> list[Instance]:
    pair = PairID.parse(path.stem)
    rows = json.loads(path.read_text(encoding="utf-8"))
    return [Instance(id=row["ID"], text=row["Text"], aspect=row["Aspect"],
                     gold=parse_va(row["VA"]) if "VA" in row else None,
                     pair=pair)
            for row in rows]


def write_predictions(path: Path, preds: list[Prediction]) -> None:
    write_json(path, [{"ID": p.id, "Aspect": p.aspect, "VA": format_va(p.va)}
                      for p in preds])


def load_predictions(path: Path) -> list[Prediction]:
    rows = json.loads(path.read_text(encoding="utf-8"))
    return [Prediction(id=row["ID"], aspect=row["Aspect"],
                       va=parse_va(row["VA"]))
            for row in rows]


def _pair_files(data_dir: Path, pairs_filter: set[str] | None) -> list[Path]:
    files = [p for p in sorted(data_dir.glob("*.json"))
             if p.name != MANIFEST_NAME and p.stem != "report"]
    if pairs_filter is not None:
        files = [p for p in files if p.stem in pairs_filter]
    return files


def _load_pair_map(data_dir: Path,
                   pairs_filter: set[str] | None = None) -> dict[PairID, list[Instance]]:
    out = {}
    for f in _pair_files(data_dir, pairs_filter):
        out[PairID.parse(f.stem)] = load_instances(f)
    if not out:
        raise FileNotFoundError(f"no per-pair instance files under {data_dir}")
    return out


# ---------------------------------------------------------------------------
# run configuration

def load_run_config(path: str | None, seed: int | None,
                    regime: str) -> tuple[EncoderSpec, list[trainer.TrainConfig], float]:
    """Resolve encoder spec, training grid and validation fraction.

    Without a config file the grid is the default seven-candidate grid; the
    --seed flag overrides any configured seed.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    base_seed = seed if seed is not None else raw.get("seed", 42)
    patience = raw.get("patience", 2)
    dropout = raw.get("dropout_rate", 0.1)
    fraction = raw.get("validation_fraction", 0.10)
    spec = EncoderSpec.from_dict(raw["encoder"]) if "encoder" in raw else EncoderSpec()
    if "grid" in raw:
        grid = [trainer.TrainConfig(
                    batch_size=entry["batch_size"],
                    learning_rate=entry["learning_rate"],
                    max_epochs=entry["max_epochs"],
                    bounded=entry["bounded"],
                    seed=entry.get("seed", base_seed),
                    patience=entry.get("patience", patience),
                    regime=regime,
                    dropout_rate=entry.get("dropout_rate", dropout))
                for entry in raw["grid"]]
    else:
        grid = [trainer.TrainConfig(**{**c.to_dict(),
                                       "seed": base_seed, "patience": patience,
                                       "regime": regime, "dropout_rate": dropout})
                for c in trainer.default_grid()]
    return spec, grid, fraction


# ---------------------------------------------------------------------------
# stages

def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.input), Path(args.out)
    pairs_filter = set(args.pairs.split(",")) if args.pairs else None
    files = _pair_files(in_dir, pairs_filter)
    if not files:
        print(f"error: no input files under {in_dir}", file=sys.stderr)
        return 1

    failures = 0
    total = corpus.PreprocessReport()
    per_pair = {}
    inputs, outputs = {}, []
    for f in files:
        inputs[f.name] = sha256_file(f)
        pair = PairID.parse(f.stem)
        try:
            records = corpus.parse_quadruplet_file(f, pair)
        except ParseError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failures += 1
            continue
        instances, report = corpus.preprocess(records)
        if not instances:
            logger.warning("%s: no instances survive preprocessing (%s)",
                           f.name, report.as_dict())
        dest = out_dir / f"{pair}.json"
        write_json(dest, instance_rows(instances))
        outputs.append(dest)
        per_pair[str(pair)] = report.as_dict()
        total = total.merged(report)

    report_path = out_dir / "report.json"
    write_json(report_path, {"pairs": per_pair, "total": total.as_dict()})
    outputs.append(report_path)
    write_manifest(out_dir, "preprocess", {"pairs": args.pairs}, inputs, outputs)
    logger.info("preprocess: %d files, %d instances out, report at %s",
                len(files), total.instances_out, report_path)
    return 1 if failures else 0


def cmd_train(args) -> int:
    data_dir, out_dir = Path(args.data), Path(args.out)
    spec, grid, fraction = load_run_config(args.config, args.seed, args.regime)
    pairs_filter = set(args.pairs.split(",")) if args.pairs else None
    per_pair = _load_pair_map(data_dir, pairs_filter)
    inputs = {f.name: sha256_file(f) for f in _pair_files(data_dir, pairs_filter)}

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.regime == "joint":
        pooled = corpus.pool_pairs(per_pair)
        train_set, val_set = corpus.split_train_validation(
            pooled, fraction, grid[0].seed)
        checkpoints = trainer.train_grid(train_set, val_set, grid, spec)
    else:
        # Separate regime trains the first grid config independently per pair.
        checkpoints = list(trainer.train_separate(per_pair, grid[0], spec,
                                                  fraction).values())

    for ckpt in checkpoints:
        path = out_dir / f"{ckpt.id}.ckpt"
        ckpt.save(path)
        outputs.append(path)
        log_path = out_dir / f"{ckpt.id}.log"
        log_path.write_text(
            "".join(f"epoch {h['epoch']} train_mse {h['train_mse']:.6f} "
                    f"val_rmse {h['val_rmse']:.6f}\n" for h in ckpt.history),
            encoding="utf-8")
        outputs.append(log_path)

    params = {"regime": args.regime, "seed": args.seed,
              "grid": [c.to_dict() for c in grid], "encoder": spec.to_dict(),
              "validation_fraction": fraction}
    write_manifest(out_dir, "train", params, inputs, outputs)
    logger.info("train: wrote %d checkpoints to %s", len(checkpoints), out_dir)
    return 0


def cmd_predict(args) -> int:
    ckpt_dir, data_dir, out_dir = Path(args.ckpts), Path(args.data), Path(args.out)
    ckpt_files = sorted(ckpt_dir.glob("*.ckpt"))
    if not ckpt_files:
        print(f"error: no checkpoints under {ckpt_dir}", file=sys.stderr)
        return 1
    pairs_filter = set(args.pairs.split(",")) if args.pairs else None
    per_pair = _load_pair_map(data_dir, pairs_filter)

    inputs = {f.name: sha256_file(f) for f in ckpt_files}
    inputs.update({f.name: sha256_file(f) for f in _pair_files(data_dir, pairs_filter)})
    outputs = []
    for f in ckpt_files:
        ckpt = trainer.Checkpoint.load(f)
        for pair, instances in per_pair.items():
            preds = ckpt.predict(instances)
            dest = out_dir / ckpt.id / f"{pair}.json"
            write_predictions(dest, preds)
            outputs.append(dest)
    write_manifest(out_dir, "predict", {"pairs": args.pairs}, inputs, outputs)
    logger.info("predict: %d checkpoints x %d pairs -> %s",
                len(ckpt_files), len(per_pair), out_dir)
    return 0


def cmd_evaluate(args) -> int:
    pred_dir, gold_dir, out_dir = Path(args.pred), Path(args.gold), Path(args.out)
    gold = _load_pair_map(gold_dir)
    preds = {}
    for pair in gold:
        path = pred_dir / f"{pair}.json"
        if not path.exists():
            print(f"error: missing prediction file {path}", file=sys.stderr)
            return 1
        preds[pair] = load_predictions(path)
    report = metrics.evaluate(preds, gold)

    inputs = {f"gold/{p}.json": sha256_file(gold_dir / f"{p}.json") for p in gold}
    inputs.update({f"pred/{p}.json": sha256_file(pred_dir / f"{p}.json")
                   for p in gold})
    report_json = out_dir / "report.json"
    write_json(report_json, report.as_dict())
    table_path = out_dir / "report.txt"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(report.render_table() + "\n", encoding="utf-8")
    write_manifest(out_dir, "evaluate", {}, inputs, [report_json, table_path])
    print(report.render_table())
    return 0


def _load_member(root: Path, member_id: str) -> dict[PairID, list[Prediction]]:
    out = {}
    for f in sorted((root / member_id).glob("*.json")):
        out[PairID.parse(f.stem)] = load_predictions(f)
    return out


def cmd_ensemble(args) -> int:
    dev_root, gold_dir, out_dir = Path(args.dev_preds), Path(args.dev_gold), Path(args.out)
    test_root = Path(args.test_preds) if args.test_preds else None
    member_ids = sorted(p.name for p in dev_root.iterdir() if p.is_dir())
    if len(member_ids) < 2:
        print(f"error: need at least 2 members under {dev_root}", file=sys.stderr)
        return 1

    members = []
    inputs = {}
    for mid in member_ids:
        dev = _load_member(dev_root, mid)
        test = _load_member(test_root, mid) if test_root else {}
        members.append(ensemble.Member(id=mid, dev=dev, test=test))
        for pair in dev:
            inputs[f"dev/{mid}/{pair}.json"] = sha256_file(
                dev_root / mid / f"{pair}.json")
    gold = _load_pair_map(gold_dir)
    for pair in gold:
        inputs[f"gold/{pair}.json"] = sha256_file(gold_dir / f"{pair}.json")

    pool = ensemble.CandidatePool(members)
    selection = ensemble.search(pool, gold, min_size=args.min_size,
                                max_size=args.max_size)

    outputs = []
    sel_path = out_dir / "selection.json"
    write_json(sel_path, selection.to_dict())
    outputs.append(sel_path)
    matrix_path = out_dir / "membership.txt"
    matrix_path.parent.mkdir(parents=True, exist_ok=True)
    matrix_path.write_text(selection.render_membership_matrix() + "\n",
                           encoding="utf-8")
    outputs.append(matrix_path)

    for split, root in (("dev", out_dir / "dev"), ("test", out_dir / "test")):
        if split == "test" and test_root is None:
            continue
        combined = ensemble.apply(selection, pool, split)
        for pair, preds in combined.items():
            dest = root / f"{pair}.json"
            write_predictions(dest, preds)
            outputs.append(dest)

    dev_report = metrics.evaluate(ensemble.apply(selection, pool, "dev"), gold)
    report_path = out_dir / "dev_report.json"
    write_json(report_path, dev_report.as_dict())
    outputs.append(report_path)

    if test_root is not None:
        sub_dir = out_dir / "submission"
        combined = ensemble.apply(selection, pool, "test")
        for pair, preds in combined.items():
            dest = sub_dir / f"{pair}.json"
            write_submission(dest, preds, clamp=args.clamp,
                             precision=args.precision)
            outputs.append(dest)

    params = {"min_size": args.min_size, "max_size": args.max_size,
              "clamp": args.clamp, "precision": args.precision}
    write_manifest(out_dir, "ensemble", params, inputs, outputs)
    print(selection.render_membership_matrix())
    return 0


def clamp_score(va: VAScore, lo: float = corpus.VA_MIN,
                hi: float = corpus.VA_MAX) -> VAScore:
    return VAScore(min(max(va.valence, lo), hi), min(max(va.arousal, lo), hi))


def write_submission(path: Path, preds: list[Prediction], clamp: bool = True,
                     precision: int = 2) -> int:
    """Write a leaderboard-format file; returns how many values were clamped."""
    rows = []
    n_clamped = 0
    for p in preds:
        va = p.va
        if clamp:
            clamped = clamp_score(va)
            if clamped != va:
                n_clamped += 1
                logger.info("clamped %s/%s: %s -> %s", p.id, p.aspect,
                            format_va(va), format_va(clamped))
            va = clamped
        rows.append({"ID": p.id, "Aspect": p.aspect,
                     "VA": format_va(va, precision)})
    write_json(path, rows)
    return n_clamped


def cmd_submit(args) -> int:
    pred_dir, out_dir = Path(args.pred), Path(args.out)
    files = _pair_files(pred_dir, set(args.pairs.split(",")) if args.pairs else None)
    if not files:
        print(f"error: no prediction files under {pred_dir}", file=sys.stderr)
        return 1
    inputs, outputs = {}, []
    total_clamped = 0
    for f in files:
        inputs[f.name] = sha256_file(f)
        preds = load_predictions(f)
        dest = out_dir / f.name
        total_clamped += write_submission(dest, preds, clamp=args.clamp,
                                          precision=args.precision)
        outputs.append(dest)
    write_manifest(out_dir, "submit",
                   {"clamp": args.clamp, "precision": args.precision,
                    "pairs": args.pairs}, inputs, outputs)
    logger.info("submit: wrote %d files (%d values clamped)",
                len(files), total_clamped)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dimasr",
        description="Aspect-level valence-arousal regression pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean raw quadruplet files")
    p.add_argument("--input", required=True, help="dir of per-pair raw files")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", help="comma-separated pair filter, e.g. zho-res,eng-lap")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the candidate grid")
    p.add_argument("--data", required=True, help="dir of per-pair instance files")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON run config (encoder, grid, seed, ...)")
    p.add_argument("--regime", choices=trainer.REGIMES, default="joint")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--pairs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with trained checkpoints")
    p.add_argument("--ckpts", required=True, help="dir of .ckpt files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score one prediction dir against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="per-pair subset search over candidates")
    p.add_argument("--dev-preds", required=True,
                   help="root dir with <member>/<pair>.json dev predictions")
    p.add_argument("--test-preds", help="matching root for test predictions")
    p.add_argument("--dev-gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-size", type=int, default=2)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--clamp", dest="clamp", action="store_true", default=True)
    p.add_argument("--no-clamp", dest="clamp", action="store_false")
    p.add_argument("--precision", type=int, default=2)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("submit", help="export leaderboard-format files")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs")
    p.add_argument("--clamp", dest="clamp", action="store_true", default=True)
    p.add_argument("--no-clamp", dest="clamp", action="store_false")
    p.add_argument("--precision", type=int, default=2)
    p.set_defaults(func=cmd_submit)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
