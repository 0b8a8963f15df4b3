"""Desk-scale generators and scorers for long-context recall tasks.

Four task families: needle-in-a-haystack (eight presets over haystack/key/
value types and counts), variable tracking (a hops-long chain of aliases),
and common/frequent-words extraction. Instances are plain ASCII so the
byte-level model vocabulary covers them; every generator hits its requested
context length exactly (padding and trimming only ever touch noise), is
deterministic under its seed, and records enough metadata for a text-level
oracle to recover the expected answers without any model.

The "essay" haystack of the original benchmark is replaced by a seeded
Markov word salad so the package stays hermetic; it is named
``essay-surrogate`` everywhere to make the substitution visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError
from .model import model_forward
from .ops import cross_entropy_logits
from .vocab import encode

ADJECTIVES = [
    "amber", "ancient", "bitter", "bold", "brisk", "calm", "cheerful", "clever",
    "crimson", "curious", "daring", "dusty", "eager", "fierce", "gentle", "gifted",
    "golden", "graceful", "hidden", "humble", "icy", "jolly", "keen", "lively",
    "lonely", "lucky", "mellow", "mighty", "nimble", "noble", "patient", "proud",
    "quiet", "rapid", "rustic", "shiny", "silent", "sleepy", "spiritual", "steady",
    "stormy", "swift", "tender", "vivid", "wandering", "wary", "wild", "witty",
]

NOUNS = [
    "anchor", "arrow", "basket", "beacon", "bridge", "candle", "canyon", "castle",
    "cavern", "compass", "crater", "dagger", "ember", "engine", "falcon", "feather",
    "fountain", "garden", "glacier", "hammer", "harbor", "kettle", "ladder", "lantern",
    "meadow", "mirror", "mountain", "needle", "orchard", "oven", "pebble", "pillar",
    "prairie", "quarry", "ribbon", "river", "saddle", "shovel", "spindle", "summit",
    "thicket", "tunnel", "valley", "vessel", "whistle", "willow", "window", "zephyr",
]

NOISE_WORDS = [
    "the", "a", "wind", "moves", "slowly", "over", "fields", "while", "clouds",
    "drift", "past", "old", "stone", "walls", "and", "quiet", "roads", "lead",
    "toward", "distant", "hills", "where", "tall", "trees", "sway", "under",
    "pale", "light", "morning", "rain", "falls", "gently", "on", "rooftops",
    "birds", "circle", "above", "green", "meadows", "as", "rivers", "run",
    "between", "low", "banks", "carrying", "leaves", "downstream", "through",
    "narrow", "valleys", "into", "broad", "plains", "dust", "settles", "near",
    "empty", "barns", "beside", "crooked", "fences", "evening", "shadows",
]

REPEAT_SENTENCE = "The old mill wheel turns beside the quiet river. "

NEEDLE_TEMPLATE = "The special magic value for {key} is {value}. "

NIAH_TASKS = {
    "niah_single_1": dict(type_haystack="repeat", type_needle_k="words", type_needle_v="numbers",
                          num_needle_k=1, num_needle_v=1, num_needle_q=1),
    "niah_single_2": dict(type_haystack="essay-surrogate", type_needle_k="words", type_needle_v="numbers",
                          num_needle_k=1, num_needle_v=1, num_needle_q=1),
    "niah_single_3": dict(type_haystack="essay-surrogate", type_needle_k="words", type_needle_v="uuids",
                          num_needle_k=1, num_needle_v=1, num_needle_q=1),
    "niah_multikey_1": dict(type_haystack="essay-surrogate", type_needle_k="words", type_needle_v="numbers",
                            num_needle_k=4, num_needle_v=1, num_needle_q=1),
    "niah_multikey_2": dict(type_haystack="needle", type_needle_k="words", type_needle_v="numbers",
                            num_needle_k=1, num_needle_v=1, num_needle_q=1),
    "niah_multikey_3": dict(type_haystack="needle", type_needle_k="uuids", type_needle_v="uuids",
                            num_needle_k=1, num_needle_v=1, num_needle_q=1),
    "niah_multivalue": dict(type_haystack="essay-surrogate", type_needle_k="words", type_needle_v="numbers",
                            num_needle_k=1, num_needle_v=4, num_needle_q=1),
    "niah_multiquery": dict(type_haystack="essay-surrogate", type_needle_k="words", type_needle_v="numbers",
                            num_needle_k=4, num_needle_v=1, num_needle_q=4),
}

RULER_GROUPS = {
    "niah_s": ("niah_single_1", "niah_single_2", "niah_single_3"),
    "niah_m": ("niah_multikey_1", "niah_multikey_2", "niah_multikey_3"),
    "niah_m_qv": ("niah_multivalue", "niah_multiquery"),
    "vt": ("vt",),
    "cf_we": ("cwe", "fwe"),
}

ALL_RULER_TASKS = tuple(t for group in RULER_GROUPS.values() for t in group)

GENERATED_TASKS = tuple(NIAH_TASKS) + ("vt", "cwe", "fwe")


@dataclass
class NIAHSpec:
    type_haystack: str
    type_needle_k: str
    type_needle_v: str
    num_needle_k: int
    num_needle_v: int
    num_needle_q: int
    context_length: int
    seed: int = 0

    def __post_init__(self):
        if self.type_haystack not in ("repeat", "essay-surrogate", "needle"):
            raise ConfigError(f"unknown haystack type {self.type_haystack!r}")
        if self.type_needle_k not in ("words", "uuids"):
            raise ConfigError(f"unknown key type {self.type_needle_k!r}")
        if self.type_needle_v not in ("numbers", "uuids"):
            raise ConfigError(f"unknown value type {self.type_needle_v!r}")
        if self.num_needle_q > self.num_needle_k:
            raise ConfigError("cannot query more keys than exist")
        if min(self.num_needle_k, self.num_needle_v, self.num_needle_q) < 1:
            raise ConfigError("needle counts must be >= 1")


@dataclass
class TaskInstance:
    task: str
    text: str
    answers: list
    query_position: int
    seed: int
    meta: dict = field(default_factory=dict)

    def tokens(self):
        return encode(self.text)

    def supervised_text(self):
        return self.text + " " + ", ".join(self.answers) + "."

    def answer_budget(self):
        return len(self.supervised_text()) - len(self.text) + 2

    def to_json_line(self):
        return json.dumps(
            {
                "task": self.task,
                "text": self.text,
                "answers": self.answers,
                "query_position": self.query_position,
                "seed": self.seed,
                "meta": self.meta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json_line(cls, line):
        d = json.loads(line)
        return cls(
            task=d["task"],
            text=d["text"],
            answers=list(d["answers"]),
            query_position=d["query_position"],
            seed=d["seed"],
            meta=d.get("meta", {}),
        )


def _uuid_like(rng):
    digits = "0123456789abcdef"
    s = "".join(digits[i] for i in rng.integers(0, 16, size=32))
    return f"{s[:8]}-{s[8:12]}-{s[12:16]}-{s[16:20]}-{s[20:]}"


def _word_key(rng, taken):
    while True:
        key = f"{ADJECTIVES[rng.integers(len(ADJECTIVES))]}-{NOUNS[rng.integers(len(NOUNS))]}"
        if key not in taken:
            return key


def _make_key(rng, kind, taken):
    if kind == "words":
        return _word_key(rng, taken)
    while True:
        key = _uuid_like(rng)
        if key not in taken:
            return key


def _make_value(rng, kind):
    if kind == "numbers":
        return str(int(rng.integers(1_000_000, 10_000_000)))
    return _uuid_like(rng)


# fixed successor lists give the essay surrogate its first-order structure
_MARKOV_FANOUT = 8
_MARKOV_NEXT = [
    [(37 * i + 11 * j + 5) % len(NOISE_WORDS) for j in range(_MARKOV_FANOUT)] for i in range(len(NOISE_WORDS))
]


def _essay_sentence(rng, state):
    n_words = int(rng.integers(6, 13))
    words = []
    for _ in range(n_words):
        state = _MARKOV_NEXT[state][rng.integers(_MARKOV_FANOUT)]
        words.append(NOISE_WORDS[state])
    sentence = " ".join(words)
    return sentence[0].upper() + sentence[1:] + ". ", state


def _noise_parts(rng, kind, budget, forbidden_keys=(), key_kind="words", value_kind="numbers"):
    """Noise sentences totalling exactly ``budget`` characters (last one trimmed)."""
    if budget < 0:
        raise GenerationError("context too small for the needles and query")
    parts = []
    total = 0
    state = int(rng.integers(len(NOISE_WORDS)))
    taken = set(forbidden_keys)
    while total < budget:
        if kind == "repeat":
            s = REPEAT_SENTENCE
        elif kind == "essay-surrogate":
            s, state = _essay_sentence(rng, state)
        else:  # every sentence defines a fresh distractor key-value pair
            key = _make_key(rng, key_kind, taken)
            taken.add(key)
            s = NEEDLE_TEMPLATE.format(key=key, value=_make_value(rng, value_kind))
        parts.append(s)
        total += len(s)
    if total > budget:
        overshoot = total - budget
        parts[-1] = parts[-1][: len(parts[-1]) - overshoot]
        if not parts[-1]:
            parts.pop()
    return parts


def _interleave(parts, needles, slots):
    """Insert needle sentences at the chosen gaps between noise parts."""
    by_slot = {}
    for needle, slot in zip(needles, slots):
        by_slot.setdefault(slot, []).append(needle)
    pieces = []
    positions = []
    offset = 0
    for slot in range(len(parts) + 1):
        for needle in by_slot.get(slot, ()):
            positions.append(offset)
            pieces.append(needle)
            offset += len(needle)
        if slot < len(parts):
            pieces.append(parts[slot])
            offset += len(parts[slot])
    return "".join(pieces), positions


def gen_niah(spec):
    """One needle-in-a-haystack instance per the six NIAHSpec knobs."""
    rng = np.random.default_rng(spec.seed)

    taken = set()
    keys = []
    for _ in range(spec.num_needle_k):
        key = _make_key(rng, spec.type_needle_k, taken)
        taken.add(key)
        keys.append(key)
    values = {k: [_make_value(rng, spec.type_needle_v) for _ in range(spec.num_needle_v)] for k in keys}

    queried = [keys[int(i)] for i in rng.choice(spec.num_needle_k, size=spec.num_needle_q, replace=False)]
    if spec.num_needle_q == 1:
        query = f"\nWhat is the special magic value for {queried[0]}? Answer:"
    else:
        listing = ", ".join(queried)
        query = f"\nWhat are the special magic values for {listing}? Answer:"
    answers = [v for k in queried for v in values[k]]

    needles = [NEEDLE_TEMPLATE.format(key=k, value=v) for k in keys for v in values[k]]
    budget = spec.context_length - sum(len(n) for n in needles) - len(query)
    parts = _noise_parts(
        rng,
        spec.type_haystack,
        budget,
        forbidden_keys=taken,
        key_kind=spec.type_needle_k,
        value_kind=spec.type_needle_v,
    )
    n_slots = len(parts) + 1
    if n_slots < len(needles):
        raise GenerationError("not enough noise to place every needle in its own slot")
    slots = sorted(int(s) for s in rng.choice(n_slots, size=len(needles), replace=False))
    haystack, positions = _interleave(parts, needles, slots)

    text = haystack + query
    if len(text) != spec.context_length:
        raise GenerationError(f"assembled {len(text)} chars, wanted {spec.context_length}")
    return TaskInstance(
        task="niah",
        text=text,
        answers=answers,
        query_position=len(haystack),
        seed=spec.seed,
        meta={
            "keys": keys,
            "values": values,
            "queried": queried,
            "slots": slots,
            "n_slots": n_slots,
            "needle_positions": positions,
        },
    )


def gen_niah_task(name, context_length, seed):
    """Named preset (niah_single_1 .. niah_multiquery) at a given length."""
    if name not in NIAH_TASKS:
        raise ConfigError(f"unknown NIAH task {name!r}")
    inst = gen_niah(NIAHSpec(context_length=context_length, seed=seed, **NIAH_TASKS[name]))
    inst.task = name
    return inst


def gen_variable_tracking(chains, hops, context_length, seed):
    """Chains of variable aliases buried in noise; answers are every alias of the queried value."""
    if hops < 1 or chains < 1:
        raise ConfigError("need hops >= 1 and chains >= 1")
    rng = np.random.default_rng(seed)
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

    names = set()

    def fresh_name():
        while True:
            n = "V" + "".join(letters[i] for i in rng.integers(0, 26, size=3))
            if n not in names:
                names.add(n)
                return n

    chain_list = []
    assignments = []
    for _ in range(chains):
        value = str(int(rng.integers(10_000, 100_000)))
        chain = [fresh_name() for _ in range(hops + 1)]
        chain_list.append((value, chain))
        assignments.append(f"VAR {chain[0]} = {value}. ")
        for prev, new in zip(chain, chain[1:]):
            assignments.append(f"VAR {new} = {prev}. ")

    value, chain = chain_list[0]
    query = f"\nWhich variables are equal to {value}? Answer:"
    answers = list(chain)

    budget = context_length - sum(len(a) for a in assignments) - len(query)
    parts = _noise_parts(rng, "repeat", budget)
    n_slots = len(parts) + 1
    if n_slots < len(assignments):
        raise GenerationError("context too small to place every assignment")
    slots = sorted(int(s) for s in rng.choice(n_slots, size=len(assignments), replace=False))
    haystack, positions = _interleave(parts, assignments, slots)

    text = haystack + query
    if len(text) != context_length:
        raise GenerationError(f"assembled {len(text)} chars, wanted {context_length}")
    return TaskInstance(
        task="vt",
        text=text,
        answers=answers,
        query_position=len(haystack),
        seed=seed,
        meta={"value": value, "chains": [{"value": v, "chain": c} for v, c in chain_list],
              "assignment_positions": positions},
    )


def _pad_to(text, target):
    if len(text) > target:
        raise GenerationError("context too small for the requested word counts")
    return text + " " * (target - len(text))


def gen_words_extraction(kind, context_length, seed, freq_cw=30, freq_ucw=3, num_cw=10,
                         alpha=2.0, num_fw=3):
    """Aggregation tasks over a shuffled word list.

    common: ``num_cw`` words repeated ``freq_cw`` times among distractors
    repeated ``freq_ucw`` times; the answer is the common words. frequent:
    per-word counts follow a power law with exponent ``alpha``; the answer is
    the ``num_fw`` most frequent words (margins enforced by construction).
    """
    if kind not in ("common", "frequent"):
        raise ConfigError(f"unknown extraction kind {kind!r}")
    rng = np.random.default_rng(seed)
    pool = ADJECTIVES + NOUNS
    order = rng.permutation(len(pool))

    if kind == "common":
        if freq_cw <= freq_ucw:
            raise GenerationError("common words must repeat more often than distractors")
        common = [pool[i] for i in order[:num_cw]]
        distractor_pool = [pool[i] for i in order[num_cw:]]
        query = f"\nWhat are the {num_cw} most common words in the list above? Answer:"
        words = [w for w in common for _ in range(freq_cw)]
        budget = context_length - len(query)
        di = 0
        while di < len(distractor_pool):
            cand = distractor_pool[di]
            extra = (len(cand) + 1) * freq_ucw
            if sum(len(w) + 1 for w in words) + extra > budget:
                break
            words.extend([cand] * freq_ucw)
            di += 1
        if sum(len(w) + 1 for w in words) > budget:
            raise GenerationError("context too small for the mandatory common words")
        counts = {w: (freq_cw if w in common else freq_ucw) for w in set(words)}
        answers = sorted(common)
        task = "cwe"
    else:
        chosen = [pool[i] for i in order[:24]]
        query = f"\nWhat are the {num_fw} most frequently appearing words above? Answer:"
        budget = context_length - len(query)

        def counts_for(scale):
            raw = [max(1, round(scale * (r + 1) ** (-alpha))) for r in range(len(chosen))]
            for r in range(num_fw - 1, -1, -1):  # strict separation around the answer cut
                raw[r] = max(raw[r], raw[r + 1] + 1)
            return raw

        def footprint(raw):
            return sum((len(w) + 1) * c for w, c in zip(chosen, raw))

        base = 1.0
        raw = counts_for(base)
        if footprint(raw) > budget:
            raise GenerationError("context too small for a power-law word sample")
        while True:  # grow the sample while it still fits; padding absorbs the slack
            cand = counts_for(base * 1.15)
            if footprint(cand) > budget:
                break
            base *= 1.15
            raw = cand
        words = [w for w, c in zip(chosen, raw) for _ in range(c)]
        counts = dict(zip(chosen, raw))
        answers = sorted(chosen[:num_fw])
        task = "fwe"

    perm = rng.permutation(len(words))
    listing = " ".join(words[i] for i in perm)
    haystack = _pad_to(listing, context_length - len(query))
    text = haystack + query
    return TaskInstance(
        task=task,
        text=text,
        answers=answers,
        query_position=len(haystack),
        seed=seed,
        meta={"counts": counts},
    )


def generate_task(name, context_length, seed):
    """Uniform entry point used by the CLI for every generated task."""
    if name in NIAH_TASKS:
        return gen_niah_task(name, context_length, seed)
    if name == "vt":
        return gen_variable_tracking(chains=1, hops=4, context_length=context_length, seed=seed)
    if name == "cwe":
        return gen_words_extraction("common", context_length, seed)
    if name == "fwe":
        return gen_words_extraction("frequent", context_length, seed)
    raise ConfigError(f"unknown task {name!r}")


def score_recall(output_text, instance):
    """Fraction of the expected answers appearing verbatim in the output."""
    if not instance.answers:
        raise ConfigError("instance carries no expected answers")
    hits = sum(1 for a in instance.answers if a in output_text)
    return hits / len(instance.answers)


def perplexity(model, tokens, eval_context_length, setting, step=0):
    """exp(mean next-token cross entropy) over non-overlapping windows."""
    tokens = np.asarray(tokens)
    if eval_context_length < 2:
        raise ConfigError("perplexity needs windows of at least two tokens")
    if tokens.size < eval_context_length:
        raise ConfigError("token stream shorter than one window")
    n_windows = tokens.size // eval_context_length
    total_nll = 0.0
    total_count = 0
    for w in range(n_windows):
        window = tokens[w * eval_context_length : (w + 1) * eval_context_length]
        logits = model_forward(model, window[:-1], setting, step=step + w)
        loss = cross_entropy_logits(logits, window[1:])
        total_nll += loss.item() * (window.size - 1)
        total_count += window.size - 1
    return float(np.exp(total_nll / total_count))


def aggregate_ruler(task_scores):
    """Scores per aggregation group, plus the average over all eleven tasks."""
    out = {}
    for group, members in RULER_GROUPS.items():
        present = [task_scores[m] for m in members if m in task_scores]
        if present:
            out[group] = float(np.mean(present))
    canonical = [task_scores[t] for t in ALL_RULER_TASKS if t in task_scores]
    if canonical:
        out["average"] = float(np.mean(canonical))
    return out
