"""Command-line pipeline driver.

Subcommands: gen-data, pretrain, tune, generate, eval, ablate, gradcheck.
Each stage reads an optional JSON run config plus flag overrides (flags
win), writes its artifacts under --out together with the resolved
effective config, and prints a one-line summary. All randomness derives
from one root seed: each stage hashes its name into the seed. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import evalsuite, inference, model, ppm, synthdata, training
from .adapters import AdapterRegistry, load_adapter, save_adapter
from .seeding import derive_seed
from .tokenizer import DEFAULT_VOCAB, quantize_image, tokenize_prompt

CONFIG_SECTIONS = ("seed", "data", "pretrain", "tune", "generate", "eval")

DATA_DEFAULTS = {"size": 2000, "two_subject_rate": 0.30, "tint_rate": 0.25,
                 "position_rate": 0.20, "no_background_phrase_rate": 0.15}
PRETRAIN_DEFAULTS = {"epochs": 6, "batch_size": 8, "learning_rate": 3e-4}
TUNE_DEFAULTS = {"steps": 400, "batch_size": 4, "learning_rate": 1e-3,
                 "rank": 4, "alpha": 1.0, "routing": "all_tokens",
                 "refs": 6, "subject_seed": 1, "identifier": None, "class_word": "cat"}
GENERATE_DEFAULTS = {"mode": "sai", "sampler": "greedy", "temperature": 0.8, "top_k": 4}
EVAL_DEFAULTS = {"seeds": 5, "threads": None, "temperature": 0.8, "top_k": 4,
                 "subject_seeds": [1, 2, 3],
                 "subject_classes": ["cat", "bear", "dog"]}


class UsageError(ValueError):
    pass


def load_run_config(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    unknown = [k for k in doc if k not in CONFIG_SECTIONS]
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    for section, defaults in (("data", DATA_DEFAULTS), ("pretrain", PRETRAIN_DEFAULTS),
                              ("tune", TUNE_DEFAULTS), ("generate", GENERATE_DEFAULTS),
                              ("eval", EVAL_DEFAULTS)):
        sub = doc.get(section, {})
        bad = [k for k in sub if k not in defaults]
        if bad:
            raise UsageError(f"unknown keys in config section {section!r}: {bad}")
    return doc


def _effective(section_defaults: dict, config_section: dict, overrides: dict) -> dict:
    eff = dict(section_defaults)
    eff.update(config_section)
    for k, v in overrides.items():
        if v is not None:
            eff[k] = v
    return eff


def _echo_config(out_dir: str, stage: str, effective: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{stage}.effective.json")
    with open(path, "w") as f:
        json.dump({"stage": stage, **effective}, f, indent=1, sort_keys=True)


def _root_seed(args, doc) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return doc.get("seed", 0)


def cmd_gen_data(args, doc) -> int:
    eff = _effective(DATA_DEFAULTS, doc.get("data", {}), {"size": args.size})
    root = _root_seed(args, doc)
    eff["seed"] = derive_seed(root, "data")
    corpus = synthdata.build_pretrain_corpus(synthdata.CorpusConfig(
        size=eff["size"], seed=eff["seed"],
        two_subject_rate=eff["two_subject_rate"], tint_rate=eff["tint_rate"],
        position_rate=eff["position_rate"],
        no_background_phrase_rate=eff["no_background_phrase_rate"],
    ))
    os.makedirs(args.out, exist_ok=True)
    manifest = {"format": "lorafuse-dataset", "version": 1, "size": eff["size"],
                "seed": eff["seed"], "items": []}
    for i, item in enumerate(corpus.items):
        name = f"img_{i:05d}.ppm"
        ppm.write_ppm(os.path.join(args.out, name), item.image, synthdata.PALETTE_RGB)
        manifest["items"].append({
            "file": name,
            "prompt": item.prompt,
            "background": item.spec.background,
            "tint": item.spec.tint,
            "position_word": item.spec.position_word,
            "placements": [
                {"class": p.subject.class_word, "row": p.row, "col": p.col}
                for p in item.spec.placements
            ],
        })
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    DEFAULT_VOCAB.save(os.path.join(args.out, "vocabulary.json"))
    _echo_config(args.out, "gen-data", eff)
    print(f"gen-data: wrote {len(corpus.items)} scenes to {args.out}")
    return 0


def _load_dataset(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "lorafuse-dataset":
        raise ValueError(f"{path}: not a dataset manifest")
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported dataset version {manifest.get('version')!r}")
    items = []
    for entry in manifest["items"]:
        image = ppm.read_ppm(os.path.join(data_dir, entry["file"]), synthdata.PALETTE_RGB)
        items.append(synthdata.SceneItem(image=image, prompt=entry["prompt"], spec=None))
    return synthdata.Corpus(config=None, items=items)


def cmd_pretrain(args, doc) -> int:
    eff = _effective(PRETRAIN_DEFAULTS, doc.get("pretrain", {}),
                     {"epochs": args.epochs, "batch_size": args.batch_size})
    root = _root_seed(args, doc)
    eff["seed"] = derive_seed(root, "pretrain")
    corpus = _load_dataset(args.data)
    result = training.pretrain_base(
        corpus,
        training.PretrainConfig(epochs=eff["epochs"], batch_size=eff["batch_size"],
                                learning_rate=eff["learning_rate"], seed=eff["seed"]),
        log=lambda e, l: print(f"  epoch {e}: nll {l:.4f}", flush=True),
    )
    os.makedirs(args.out, exist_ok=True)
    weights_path = os.path.join(args.out, "base.flra")
    model.save_weights(weights_path, result.weights)
    with open(os.path.join(args.out, "pretrain_log.csv"), "w") as f:
        f.write("epoch,nll\n")
        for i, v in enumerate(result.epoch_nll):
            f.write(f"{i},{v:.6f}\n")
    _echo_config(args.out, "pretrain", eff)
    print(f"pretrain: final corpus nll {result.final_nll:.4f}, weights at {weights_path}")
    return 0


def cmd_tune(args, doc) -> int:
    eff = _effective(TUNE_DEFAULTS, doc.get("tune", {}), {
        "steps": args.steps, "subject_seed": args.subject_seed,
        "identifier": args.identifier, "class_word": args.class_word,
        "routing": args.routing,
    })
    root = _root_seed(args, doc)
    eff["seed"] = derive_seed(root, f"tune:{eff['identifier'] or eff['subject_seed']}")
    base = model.load_weights(args.weights)
    subject = synthdata.make_subject(eff["subject_seed"], eff["class_word"],
                                     identifier=eff["identifier"])
    refs = synthdata.build_reference_set(subject, eff["refs"],
                                         seed=derive_seed(root, f"refs:{subject.uid}"))
    result = training.tune_subject(base, refs, training.TuneConfig(
        steps=eff["steps"], batch_size=eff["batch_size"],
        learning_rate=eff["learning_rate"], rank=eff["rank"], alpha=eff["alpha"],
        routing=eff["routing"], seed=eff["seed"],
    ))
    os.makedirs(args.out, exist_ok=True)
    stem = subject.uid.replace(" ", "_")
    adapter_path = os.path.join(args.out, f"{stem}.lora")
    save_adapter(adapter_path, result.adapter)
    training.save_tuning_log(os.path.join(args.out, f"{stem}_tuning.csv"), result)
    eff["subject"] = subject.uid
    _echo_config(args.out, f"tune-{stem}", eff)
    final = float(np.mean(result.step_losses[-20:]))
    print(f"tune: {subject.uid} nll {result.initial_nll:.4f} -> {final:.4f} "
          f"({eff['steps']} steps), adapter at {adapter_path}")
    return 0


def _registry_from(paths) -> AdapterRegistry:
    registry = AdapterRegistry()
    for p in paths or ():
        registry.add(load_adapter(p))
    return registry


def cmd_generate(args, doc) -> int:
    eff = _effective(GENERATE_DEFAULTS, doc.get("generate", {}), {
        "mode": args.mode, "sampler": args.sampler, "temperature": args.temperature,
        "top_k": args.top_k,
    })
    root = _root_seed(args, doc)
    base = model.load_weights(args.weights)
    registry = _registry_from(args.adapters)
    sampler = inference.SamplerConfig(
        mode=eff["sampler"], temperature=eff["temperature"], top_k=eff["top_k"],
        seed=derive_seed(root, f"generate:{args.prompt}"),
    )
    result = inference.generate(base, registry, args.prompt, sampler, mode=eff["mode"])
    os.makedirs(args.out, exist_ok=True)
    image_path = os.path.join(args.out, args.name + ".ppm")
    ppm.write_ppm(image_path, result.image, synthdata.PALETTE_RGB)
    sidecar = {
        "format": "lorafuse-generation",
        "version": 1,
        "prompt": args.prompt,
        "mode": result.mode,
        "sampler": dataclasses.asdict(result.sampler),
        "root_seed": root,
        "spans": [
            {"subject": s.subject_id, "start": s.start, "end": s.end}
            for s in result.spans
        ],
        "tokens": [int(t) for t in result.tokens],
    }
    with open(os.path.join(args.out, args.name + ".json"), "w") as f:
        json.dump(sidecar, f, indent=1)
    print(f"generate: {image_path} ({eff['sampler']}, mode {eff['mode']})")
    return 0


def _eval_subjects(eff):
    subjects = []
    for seed, cls in zip(eff["subject_seeds"], eff["subject_classes"]):
        subjects.append(synthdata.make_subject(seed, cls))
    return subjects


def cmd_eval(args, doc) -> int:
    """Single-condition evaluation of provided adapters over the standard
    prompt set (fidelity/consistency per prompt, JSON + CSV report)."""
    eff = _effective(EVAL_DEFAULTS, doc.get("eval", {}),
                     {"seeds": args.seeds, "threads": args.threads})
    root = _root_seed(args, doc)
    base = model.load_weights(args.weights)
    registry = _registry_from(args.adapters)
    subjects = _eval_subjects(eff)
    subject_map = {s.uid: s for s in subjects if s.uid in registry.subjects()}
    if not subject_map:
        raise ValueError("no provided adapter matches the configured eval subjects")
    picked = [s for s in subjects if s.uid in subject_map]
    refsets = {
        s.uid: synthdata.build_reference_set(s, 6, seed=derive_seed(root, f"refs:{s.uid}"))
        for s in picked
    }
    singles = []
    for i, s in enumerate(picked):
        for j in range(2):
            bg = synthdata.EVAL_BACKGROUNDS[(i + 2 * j) % 4]
            singles.append(f"a photo of {s.uid} on {bg} background")
    rows = []
    fid_all, cons_all = [], []
    for prompt in singles:
        for k in range(eff["seeds"]):
            sampler = inference.SamplerConfig(
                mode="temperature", temperature=eff["temperature"],
                top_k=eff["top_k"], seed=derive_seed(k, f"gen:{prompt}"),
            )
            result = inference.generate(base, registry, prompt, sampler, mode="sai")
            fid, cons, over = evalsuite.score_generation(
                result.image, prompt, subject_map, refsets
            )
            fid_all.append(fid)
            cons_all.append(cons)
            rows.append([prompt, k, f"{fid:.6f}", f"{cons:.6f}",
                         "" if over is None else f"{over:.6f}"])
    os.makedirs(args.out, exist_ok=True)
    report = {
        "format": "lorafuse-eval",
        "version": 1,
        "subjects": list(subject_map),
        "prompts": singles,
        "mean_subject_fidelity": float(np.mean(fid_all)),
        "mean_prompt_consistency": float(np.mean(cons_all)),
    }
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(report, f, indent=1)
    with open(os.path.join(args.out, "eval.csv"), "w") as f:
        f.write("prompt,seed,subject_fidelity,prompt_consistency,background_overfit\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    _echo_config(args.out, "eval", eff)
    print(f"eval: fidelity {report['mean_subject_fidelity']:.3f} "
          f"consistency {report['mean_prompt_consistency']:.3f} over {len(rows)} generations")
    return 0


def cmd_ablate(args, doc) -> int:
    eff = _effective(EVAL_DEFAULTS, doc.get("eval", {}),
                     {"seeds": args.seeds, "threads": args.threads})
    tune_eff = _effective(TUNE_DEFAULTS, doc.get("tune", {}), {})
    root = _root_seed(args, doc)
    base = model.load_weights(args.weights)
    subjects = _eval_subjects(eff)
    config = evalsuite.AblationConfig(
        seeds=tuple(range(eff["seeds"])),
        refs_seed=derive_seed(root, "ablate:refs"),
        tune=training.TuneConfig(
            steps=tune_eff["steps"], batch_size=tune_eff["batch_size"],
            learning_rate=tune_eff["learning_rate"], rank=tune_eff["rank"],
            alpha=tune_eff["alpha"], seed=derive_seed(root, "ablate:tune"),
        ),
        temperature=eff["temperature"], top_k=eff["top_k"], threads=eff["threads"],
    )
    report = evalsuite.run_ablation_suite(base, subjects, config)
    os.makedirs(args.out, exist_ok=True)
    report.to_json(os.path.join(args.out, "ablation.json"))
    report.to_csv(os.path.join(args.out, "ablation.csv"))
    _echo_config(args.out, "ablate", eff)
    parts = []
    for cond in evalsuite.CONDITIONS:
        parts.append(
            f"{cond}: fid {report.mean(cond, 'subject_fidelity'):.3f} "
            f"cons {report.mean(cond, 'prompt_consistency'):.3f} "
            f"bg {report.mean(cond, 'background_overfit'):.3f}"
        )
    print("ablate: " + " | ".join(parts))
    return 0


def cmd_gradcheck(args, doc) -> int:
    err, n = model.gradient_check(seed=args.seed if args.seed is not None else 0)
    print(f"gradcheck: max relative gradient error {err:.3e} over {n} parameters")
    return 0 if err < 1e-4 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorafuse",
        description="Subject personalization pipeline for the toy image generator.",
    )
    parser.add_argument("--config", help="JSON run config (flags override it)")
    parser.add_argument("--seed", type=int, help="root seed for the whole run")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the pretraining dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the base model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("tune", help="tune one subject adapter")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subject-seed", type=int, dest="subject_seed")
    p.add_argument("--identifier")
    p.add_argument("--class", dest="class_word")
    p.add_argument("--steps", type=int)
    p.add_argument("--routing", choices=["all_tokens", "subject_only"])
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("generate", help="generate one image from a prompt")
    p.add_argument("--weights", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--adapters", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="generation")
    p.add_argument("--mode", choices=list(inference.INFERENCE_MODES))
    p.add_argument("--sampler", choices=["greedy", "temperature"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", type=int, dest="top_k")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="evaluate adapters on the standard prompts")
    p.add_argument("--weights", required=True)
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the full ablation suite")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; map usage to 1
        return 0 if exc.code == 0 else 1
    try:
        doc = load_run_config(args.config) if args.config else {}
        return args.fn(args, doc)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
