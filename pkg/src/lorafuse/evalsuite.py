"""Deterministic pixel-level oracles and the ablation harness.

Subject fidelity slides the subject's opaque sprite mask over the image
and scores cell agreement with signature cells triple-weighted, so
identity (signature code) counts more than class shape. Prompt
consistency checks every verifiable clause of the fixed prompt grammar:
background color, per-mention subject count, and tint. Background overfit
measures how much of the non-subject area copies a reference-set
background instead of the prompted one. The ablation harness tunes
adapters with and without full-token tuning and generates with and
without span routing, reporting per-condition means.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import synthdata
from .adapters import AdapterRegistry
from .inference import SamplerConfig, generate
from .seeding import derive_seed
from .synthdata import (
    COLOR_INDEX,
    EVAL_BACKGROUNDS,
    SPRITE_SIZE,
    Subject,
    make_canonical,
)
from .training import TuneConfig, tune_subject

DETECT_THRESHOLD = 0.65

SIG_WEIGHT = 3.0


class PromptParseError(ValueError):
    pass


@dataclass(frozen=True)
class ParsedPrompt:
    """Structured view of a prompt under the fixed grammar:
    [a photo of] [tint] [position] subject [and subject] [on color background]
    """

    mentions: tuple  # ((identifier | None, class_word), ...)
    tint: str | None
    position: str | None
    background: str | None


def parse_prompt(prompt_text: str) -> ParsedPrompt:
    words = prompt_text.lower().split()
    i = 0
    if words[:3] == ["a", "photo", "of"]:
        i = 3
    tint = None
    position = None
    while i < len(words) and words[i] not in synthdata.CLASS_WORDS and words[
        i
    ] not in synthdata.IDENTIFIERS:
        w = words[i]
        if w in ("corner", "center") and position is None:
            position = w
        elif w in synthdata.COLOR_WORDS and tint is None:
            tint = w
        else:
            raise PromptParseError(f"unexpected attribute word {w!r}")
        i += 1
    mentions = []
    while i < len(words) and words[i] != "on":
        if mentions:
            if words[i] != "and":
                raise PromptParseError(f"expected 'and', got {words[i]!r}")
            i += 1
        ident = None
        if i < len(words) and words[i] in synthdata.IDENTIFIERS:
            ident = words[i]
            i += 1
        if i >= len(words) or words[i] not in synthdata.CLASS_WORDS:
            raise PromptParseError("expected a class word in subject mention")
        mentions.append((ident, words[i]))
        i += 1
    background = None
    if i < len(words):
        if (
            len(words) - i != 3
            or words[i] != "on"
            or words[i + 1] not in synthdata.COLOR_WORDS
            or words[i + 2] != "background"
        ):
            raise PromptParseError(f"malformed background phrase: {' '.join(words[i:])}")
        background = words[i + 1]
    if not mentions and background is None:
        raise PromptParseError("prompt has no verifiable clause")
    return ParsedPrompt(
        mentions=tuple(mentions), tint=tint, position=position, background=background
    )


def _modal_color(img: np.ndarray) -> int:
    return int(np.bincount(img.reshape(-1), minlength=synthdata.N_COLORS).argmax())


def _match_score_grid(img: np.ndarray, subject: Subject, tint: str | None) -> np.ndarray:
    """Weighted sprite-match score at every placement (translation sweep)."""
    h, w = img.shape
    s = SPRITE_SIZE
    if h < s or w < s:
        return np.zeros((1, 1), dtype=np.float64)
    windows = sliding_window_view(img, (s, s))  # (h-s+1, w-s+1, s, s)

    mask = subject.mask
    weights = np.where(mask, 1.0, 0.0)
    for r, c, _ in subject.signature:
        weights[r, c] = SIG_WEIGHT

    if tint is None:
        matches = (windows == subject.sprite) & mask
    else:
        # exact on signature cells, shape-only (any non-background color)
        # on the rest of the body
        exact = np.zeros_like(mask)
        for r, c, _ in subject.signature:
            exact[r, c] = True
        bg_est = _modal_color(img)
        matches = np.where(
            exact, windows == subject.sprite, (windows != bg_est) & mask
        ) & mask
    scores = np.einsum("ijrc,rc->ij", matches.astype(np.float64), weights)
    return scores / weights.sum()


def subject_fidelity(img: np.ndarray, subject: Subject, tint: str | None = None) -> float:
    """Best sprite-match score over all placements, in [0, 1]."""
    return float(_match_score_grid(np.asarray(img), subject, tint).max())


def detect_instances(img: np.ndarray, subject: Subject, tint: str | None = None,
                     threshold: float = DETECT_THRESHOLD):
    """Greedy non-overlapping detections: (row, col, score), best first."""
    grid = _match_score_grid(np.asarray(img), subject, tint)
    order = np.argsort(-grid, axis=None, kind="stable")
    found = []
    for flat in order:
        r, c = np.unravel_index(int(flat), grid.shape)
        score = float(grid[r, c])
        if score < threshold:
            break
        if any(abs(r - r0) < SPRITE_SIZE and abs(c - c0) < SPRITE_SIZE for r0, c0, _ in found):
            continue
        found.append((int(r), int(c), score))
    return found


def _best_window(img: np.ndarray, subject: Subject, tint: str | None):
    grid = _match_score_grid(np.asarray(img), subject, tint)
    r, c = np.unravel_index(int(grid.argmax()), grid.shape)
    return int(r), int(c)


def _resolve_mention(mention, subjects) -> Subject:
    ident, cls = mention
    if ident is None:
        return make_canonical(cls)
    uid = f"{ident} {cls}"
    if subjects is None or uid not in subjects:
        raise ValueError(f"no known subject for prompt mention {uid!r}")
    return subjects[uid]


def _non_subject_pixels(img: np.ndarray, parsed: ParsedPrompt, subjects) -> np.ndarray:
    """Flat pixel values outside the best-match footprint of each mention."""
    keep = np.ones(img.shape, dtype=bool)
    for idx, mention in enumerate(parsed.mentions):
        subj = _resolve_mention(mention, subjects)
        tint = parsed.tint if idx == 0 else None
        r, c = _best_window(img, subj, tint)
        region = keep[r : r + SPRITE_SIZE, c : c + SPRITE_SIZE]
        region[subj.mask] = False
    return img[keep]


def prompt_consistency(img: np.ndarray, prompt_text: str, subjects=None) -> float:
    """Fraction of the prompt's verifiable clauses the image satisfies.

    Clauses: background color (modal color of non-subject pixels), one
    count clause per subject mention (exactly one detection), and the tint
    attribute (modal non-signature body color of the first subject).
    """
    img = np.asarray(img)
    parsed = parse_prompt(prompt_text)
    passed = 0
    total = 0

    detections = []
    for idx, mention in enumerate(parsed.mentions):
        subj = _resolve_mention(mention, subjects)
        tint = parsed.tint if idx == 0 else None
        found = detect_instances(img, subj, tint)
        detections.append((subj, tint, found))
        total += 1
        if len(found) == 1:
            passed += 1

    if parsed.background is not None:
        total += 1
        rest = _non_subject_pixels(img, parsed, subjects)
        if rest.size and _modal_color(rest) == COLOR_INDEX[parsed.background]:
            passed += 1

    if parsed.tint is not None and parsed.mentions:
        subj, tint, found = detections[0]
        total += 1
        if found:
            r, c, _ = found[0]
            window = img[r : r + SPRITE_SIZE, c : c + SPRITE_SIZE]
            exempt = subj.tint_exempt_cells()
            body = [
                int(window[rr, cc])
                for rr in range(SPRITE_SIZE)
                for cc in range(SPRITE_SIZE)
                if subj.mask[rr, cc] and (rr, cc) not in exempt
            ]
            if body and int(np.bincount(body, minlength=synthdata.N_COLORS).argmax()) == COLOR_INDEX[tint]:
                passed += 1

    return passed / total


def background_overfit(img: np.ndarray, refs, prompt_text: str, subjects=None) -> float:
    """Fraction of non-subject pixels colored like any reference background."""
    img = np.asarray(img)
    parsed = parse_prompt(prompt_text)
    ref_colors = {COLOR_INDEX[w] for w in refs.backgrounds}
    if parsed.background is not None and COLOR_INDEX[parsed.background] in ref_colors:
        raise ValueError(
            f"prompted background {parsed.background!r} is itself a reference background"
        )
    lookup = dict(subjects or {})
    lookup.setdefault(refs.subject.uid, refs.subject)
    rest = _non_subject_pixels(img, parsed, lookup)
    if rest.size == 0:
        return 0.0
    return float(np.isin(rest, list(ref_colors)).mean())


# --- ablation harness -------------------------------------------------------


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    refs_per_subject: int = 6
    refs_seed: int = 0
    tune: TuneConfig = field(default_factory=TuneConfig)
    temperature: float = 0.8
    top_k: int = 4
    threads: int | None = None


CONDITIONS = ("ours", "no_sai", "no_ftt")
METRICS = ("subject_fidelity", "prompt_consistency", "background_overfit")


@dataclass
class EvalReport:
    conditions: dict  # condition -> metric -> {"mean": x, "per_seed": {seed: x}}
    seeds: list
    subjects: list
    single_prompts: list
    pair_prompts: list
    cells: list  # flat per-generation records

    def to_json(self, path) -> None:
        doc = {
            "format": "lorafuse-eval-report",
            "version": 1,
            "conditions": self.conditions,
            "seeds": self.seeds,
            "subjects": self.subjects,
            "single_prompts": self.single_prompts,
            "pair_prompts": self.pair_prompts,
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["condition", "subject", "prompt", "seed", "metric", "value"])
            for cell in self.cells:
                writer.writerow(cell)

    def mean(self, condition: str, metric: str) -> float:
        return self.conditions[condition][metric]["mean"]


def standard_prompts(subjects):
    """8 single-subject prompts (two per-subject plus two tinted) and 4 pair
    prompts over the evaluation background pool."""
    if len(subjects) < 3:
        raise ValueError("ablation suite needs at least 3 subjects")
    bgs = EVAL_BACKGROUNDS
    s = subjects
    singles = []
    for i, subj in enumerate(s[:3]):
        singles.append(f"a photo of {subj.uid} on {bgs[i % 4]} background")
        singles.append(f"a photo of {subj.uid} on {bgs[(i + 2) % 4]} background")
    singles.append(f"a photo of purple {s[0].uid} on {bgs[1]} background")
    singles.append(f"a photo of purple {s[1].uid} on {bgs[3]} background")
    pairs = [
        f"a photo of {s[0].uid} and {s[1].uid} on {bgs[0]} background",
        f"a photo of {s[1].uid} and {s[2].uid} on {bgs[1]} background",
        f"a photo of {s[0].uid} and {s[2].uid} on {bgs[2]} background",
        f"a photo of purple {s[0].uid} and {s[1].uid} on {bgs[3]} background",
    ]
    return singles, pairs


def _suite_threads(requested):
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("FREELORA_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def score_generation(image, prompt_text, subjects, refsets):
    """(fidelity, consistency, overfit-or-None) for one generated image."""
    parsed = parse_prompt(prompt_text)
    fids = []
    for idx, (ident, cls) in enumerate(parsed.mentions):
        if ident is None:
            continue
        subj = subjects[f"{ident} {cls}"]
        fids.append(subject_fidelity(image, subj, parsed.tint if idx == 0 else None))
    fidelity = float(np.mean(fids)) if fids else 0.0
    consistency = prompt_consistency(image, prompt_text, subjects)
    overfit = None
    if len(parsed.mentions) == 1 and parsed.mentions[0][0] is not None:
        uid = f"{parsed.mentions[0][0]} {parsed.mentions[0][1]}"
        overfit = background_overfit(image, refsets[uid], prompt_text, subjects)
    return fidelity, consistency, overfit


def run_ablation_suite(base, subjects, config: AblationConfig | None = None) -> EvalReport:
    """Tune per-subject adapters under both tuning modes, generate under both
    routing modes, and report per-condition metric means.

    Conditions: ours = full-token tuning + span routing; no_sai = full-token
    tuning + adapters on every prompt token; no_ftt = span-restricted tuning
    + span routing.
    """
    config = config or AblationConfig()
    if len(subjects) < 3:
        raise ValueError("ablation suite needs at least 3 subjects")
    if len(config.seeds) < 5:
        raise ValueError("ablation suite needs at least 5 seeds")

    subject_map = {s.uid: s for s in subjects}
    refsets = {
        s.uid: synthdata.build_reference_set(s, config.refs_per_subject, config.refs_seed)
        for s in subjects
    }

    registries = {"ftt": AdapterRegistry(), "subject_only": AdapterRegistry()}
    for s in subjects:
        for mode_name, routing in (("ftt", "all_tokens"), ("subject_only", "subject_only")):
            cfg = TuneConfig(
                steps=config.tune.steps,
                batch_size=config.tune.batch_size,
                learning_rate=config.tune.learning_rate,
                rank=config.tune.rank,
                alpha=config.tune.alpha,
                routing=routing,
                seed=config.tune.seed,
            )
            registries[mode_name].add(tune_subject(base, refsets[s.uid], cfg).adapter)

    singles, pairs = standard_prompts(subjects)
    prompts = singles + pairs
    setups = {
        "ours": (registries["ftt"], "sai"),
        "no_sai": (registries["ftt"], "all_tokens"),
        "no_ftt": (registries["subject_only"], "sai"),
    }

    jobs = []
    for cond in CONDITIONS:
        for prompt in prompts:
            for seed in config.seeds:
                jobs.append((cond, prompt, seed))

    def run_cell(job):
        cond, prompt, seed = job
        registry, mode = setups[cond]
        sampler = SamplerConfig(
            mode="temperature",
            temperature=config.temperature,
            top_k=config.top_k,
            seed=derive_seed(seed, f"gen:{prompt}"),
        )
        result = generate(base, registry, prompt, sampler, mode=mode)
        return job, score_generation(result.image, prompt, subject_map, refsets)

    n_threads = _suite_threads(config.threads)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run_cell, jobs))
    else:
        results = [run_cell(job) for job in jobs]

    cells = []
    by_cond_seed = {c: {s: {m: [] for m in METRICS} for s in config.seeds} for c in CONDITIONS}
    for (cond, prompt, seed), (fid, cons, over) in results:
        parsed = parse_prompt(prompt)
        names = "+".join(
            f"{i} {c}" for i, c in parsed.mentions if i is not None
        )
        bucket = by_cond_seed[cond][seed]
        bucket["subject_fidelity"].append(fid)
        bucket["prompt_consistency"].append(cons)
        cells.append([cond, names, prompt, seed, "subject_fidelity", f"{fid:.6f}"])
        cells.append([cond, names, prompt, seed, "prompt_consistency", f"{cons:.6f}"])
        if over is not None:
            bucket["background_overfit"].append(over)
            cells.append([cond, names, prompt, seed, "background_overfit", f"{over:.6f}"])

    conditions = {}
    for cond in CONDITIONS:
        conditions[cond] = {}
        for metric in METRICS:
            per_seed = {
                str(seed): float(np.mean(by_cond_seed[cond][seed][metric]))
                for seed in config.seeds
            }
            conditions[cond][metric] = {
                "mean": float(np.mean(list(per_seed.values()))),
                "per_seed": per_seed,
            }

    return EvalReport(
        conditions=conditions,
        seeds=list(config.seeds),
        subjects=[s.uid for s in subjects],
        single_prompts=singles,
        pair_prompts=pairs,
        cells=cells,
    )


def base_prompt_consistency(weights, prompts=None, seeds=(0, 1, 2),
                            temperature=0.8, top_k=4) -> float:
    """Mean prompt consistency of base-model generations on generic
    (canonical-class) prompts; the pretraining quality gauge."""
    if prompts is None:
        prompts = [
            f"a photo of {cls} on {bg} background"
            for cls, bg in zip(
                synthdata.CLASS_WORDS,
                (EVAL_BACKGROUNDS * 2)[: len(synthdata.CLASS_WORDS)],
            )
        ]
    registry = AdapterRegistry()
    scores = []
    for prompt in prompts:
        for seed in seeds:
            sampler = SamplerConfig(
                mode="temperature",
                temperature=temperature,
                top_k=top_k,
                seed=derive_seed(seed, f"gen:{prompt}"),
            )
            result = generate(weights, registry, prompt, sampler)
            scores.append(prompt_consistency(result.image, prompt))
    return float(np.mean(scores))
