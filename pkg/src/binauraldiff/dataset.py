"""Dataset synthesis and the JSONL manifest it produces.

Each sample is a rendered scene: per-source procedural audio, binaural
render, mono mixture, and a prompt whose spatial claims the scene geometry
satisfies exactly. Paths in the manifest are manifest-relative so a dataset
directory can be moved wholesale.
"""
from __future__ import annotations

import json
import multiprocessing
from pathlib import Path

import numpy as np

from . import prompts, sim, wavio

MANIFEST_NAME = "manifest.jsonl"


def sample_seed(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator independent of worker scheduling."""
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def synth_sample(index: int, seed: int, duration_s: float,
                 category: str) -> dict:
    """Render one (scene, prompt) pair; returns arrays plus manifest row
    fields, leaving file writing to the caller."""
    rng = sample_seed(seed, index)
    scene, spec = prompts.sample_scene_spec(rng, category)
    monos = [sim.synth_source_signal(s.class_id, duration_s, rng)
             for s in scene.sources]
    binaural, gain = sim.mix_scene(scene, monos)
    text = prompts.generate_prompt(spec, rng)
    return {
        "id": f"s{index:06d}",
        "category": category,
        "prompt_text": text,
        "spec": prompts.spec_to_json(spec),
        "seed": seed,
        "mix_gain": gain,
        "binaural": binaural,
        "mono": sim.mono_downmix(binaural),
        "diff": sim.channel_difference(binaural),
    }


def _category_plan(count: int, mix: dict | None) -> list[str]:
    counts = prompts.category_counts(count, mix)
    plan = []
    for cat in prompts.CATEGORIES:
        plan.extend([cat] * counts[cat])
    return plan


def _render_one(args):
    index, seed, duration_s, category, out_dir, write_diff = args
    s = synth_sample(index, seed, duration_s, category)
    audio = Path(out_dir) / "audio"
    row = {k: s[k] for k in
           ("id", "category", "prompt_text", "spec", "seed", "mix_gain")}
    bp = audio / f"{s['id']}_binaural.wav"
    mp = audio / f"{s['id']}_mono.wav"
    wavio.write_wav(bp, s["binaural"])
    wavio.write_wav(mp, s["mono"])
    row["binaural_path"] = f"audio/{bp.name}"
    row["mono_path"] = f"audio/{mp.name}"
    if write_diff:
        dp = audio / f"{s['id']}_diff.wav"
        wavio.write_wav(dp, s["diff"])
        row["diff_path"] = f"audio/{dp.name}"
    return row


def synthesize_dataset(out_dir, count: int, seed: int,
                       duration_s: float = 1.0,
                       category_mix: dict | None = None,
                       workers: int = 1, write_diff: bool = True,
                       force: bool = False) -> Path:
    """Write `count` samples plus a manifest under out_dir; returns the
    manifest path. Deterministic in (count, seed, duration, mix): the
    manifest bytes do not depend on worker count or scheduling."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(
            f"{out_dir} exists and is not empty; pass force to overwrite")
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    plan = _category_plan(count, category_mix)
    jobs = [(i, seed, duration_s, plan[i], str(out_dir), write_diff)
            for i in range(count)]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            rows = list(pool.imap(_render_one, jobs, chunksize=8))
    else:
        rows = [_render_one(j) for j in jobs]
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list[dict]:
    """Rows with paths resolved against the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    rows = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: invalid JSON ({e})") from e
            for key in ("binaural_path", "mono_path", "diff_path"):
                if key in row and not Path(row[key]).is_absolute():
                    row[key] = str(base / row[key])
            rows.append(row)
    return rows


def validate_manifest(rows: list[dict]) -> None:
    """Check the invariants every consumer relies on: unique ids, existing
    audio, and prompts that carry exactly their stored spec."""
    if not rows:
        raise ValueError("manifest has no rows")
    seen = set()
    for row in rows:
        rid = row.get("id")
        if rid in seen:
            raise ValueError(f"duplicate manifest id {rid!r}")
        seen.add(rid)
        for key in ("binaural_path", "mono_path", "diff_path"):
            if key in row and not Path(row[key]).exists():
                raise FileNotFoundError(f"{rid}: missing {key} {row[key]}")
        spec = prompts.spec_from_json(row["spec"])
        if prompts.parse_prompt(row["prompt_text"]) != spec:
            raise ValueError(f"{rid}: prompt_text does not parse to its spec")
