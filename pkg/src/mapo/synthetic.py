"""Desk-scale synthetic task world.

Builds a tiny closed-vocabulary corpus in which a scripted target model
prefers prompts containing hidden "courtesy" words: the reply reveals a
fraction of the prompt's content proportional to how many hidden template
words the prompt mentions, so match-degree scores (and hence warm-up
rankings, the reward model, and RL) all hinge on that hidden preference.

Run `python -m mapo.synthetic OUTDIR` to materialize a ready-to-train
workspace (prompt files, pretrain mix, eval records, config.yaml).
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from mapo.lm_core.stubs import DEFAULT_SYNONYMS

TEMPLATE_WORDS = ("kindly", "please", "carefully", "politely")

INSTRUCTION_WORDS = (
    "describe", "depict", "show", "display", "list", "enumerate",
    "the", "a", "an", "about", "near", "with", "and", "of", "in",
    "This", "is", "generative", "question-answering", "classification",
    "task.", "label", "answer", "reply", "choose", "pick", "what", "story",
    "tale",
)

NOUNS = (
    "cat", "dog", "bird", "fox", "tree", "river", "house", "garden",
    "cloud", "stone", "boat", "lamp", "field", "bridge", "tower", "road",
)

ADJECTIVES = (
    "red", "blue", "old", "tiny", "bright", "quiet", "green", "tall",
    "small", "little", "big", "large", "quick", "fast", "warm", "dark",
)

LABELS = ("sports", "business", "weather", "travel")


def vocabulary_words() -> list[str]:
    """Every surface word the toy world can produce, specials excluded."""
    words = set(TEMPLATE_WORDS) | set(INSTRUCTION_WORDS) | set(NOUNS) | set(ADJECTIVES)
    words |= set(LABELS)
    words |= set(DEFAULT_SYNONYMS) | set(DEFAULT_SYNONYMS.values())
    words |= {"picture", "image"}
    return sorted(words)


def generation_prompt(rng: random.Random) -> str:
    verb = rng.choice(("describe", "show", "list"))
    adj1, adj2 = rng.sample(ADJECTIVES, 2)
    noun1, noun2 = rng.sample(NOUNS, 2)
    body = f"{verb} the {adj1} {noun1} near the {adj2} {noun2}"
    if rng.random() < 0.3:
        body = f"{TEMPLATE_WORDS[rng.randrange(len(TEMPLATE_WORDS))]} {body}"
    return body


def qa_prompt(rng: random.Random) -> str:
    adj = rng.choice(ADJECTIVES)
    noun1, noun2 = rng.sample(NOUNS, 2)
    return f"what is the {adj} {noun1} about the {noun2}"


def classification_prompt(rng: random.Random) -> str:
    label = rng.choice(LABELS)
    return f"label the story about the {rng.choice(NOUNS)} {label}"


def content_words(prompt: str) -> list[str]:
    skip = set(INSTRUCTION_WORDS) | set(TEMPLATE_WORDS)
    return [w for w in prompt.split() if w not in skip]


def reference_for(prompt: str, task: str) -> str:
    if task == "classification":
        return content_words(prompt)[-1]
    return " ".join(content_words(prompt))


def make_records(n: int, seed: int, task: str = "generation") -> list[dict]:
    """n distinct (prompt, reference) records for one task kind."""
    rng = random.Random(seed)
    makers = {
        "generation": generation_prompt,
        "qa": qa_prompt,
        "classification": classification_prompt,
    }
    maker = makers[task]
    records = []
    seen = set()
    while len(records) < n:
        prompt = maker(rng)
        if prompt in seen:
            continue
        seen.add(prompt)
        records.append(
            {
                "prompt": prompt,
                "reference": reference_for(prompt, task),
                "task": task,
                "dataset": f"toy-{task}",
            }
        )
    return records


def pretrain_sentences(n: int, seed: int) -> list[str]:
    """General-task sentences drawn from the same closed vocabulary."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        adj = rng.choice(ADJECTIVES)
        noun1, noun2 = rng.sample(NOUNS, 2)
        out.append(f"the {adj} {noun1} is near the {noun2}")
    return out


def write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def write_workspace(
    out_dir: Path,
    seed: int = 7,
    n_warmup: int = 48,
    n_rl: int = 16,
    n_eval: int = 16,
    n_pretrain: int = 16,
) -> Path:
    """Materialize prompt files plus a ready-to-run config; returns config path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(out_dir / "warmup_prompts.jsonl", make_records(n_warmup, seed))
    write_jsonl(out_dir / "rl_prompts.jsonl", make_records(n_rl, seed + 1))
    write_jsonl(out_dir / "eval_records.jsonl", make_records(n_eval, seed + 2))
    write_jsonl(
        out_dir / "pretrain.jsonl",
        [{"text": t} for t in pretrain_sentences(n_pretrain, seed + 3)],
    )
    from mapo.pipeline.config import default_config_dict, save_config_dict

    config = default_config_dict(out_dir)
    config_path = out_dir / "config.yaml"
    save_config_dict(config, config_path)
    return config_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a toy training workspace")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--warmup-prompts", type=int, default=48)
    args = parser.parse_args(argv)
    config_path = write_workspace(args.out_dir, seed=args.seed, n_warmup=args.warmup_prompts)
    print(config_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
