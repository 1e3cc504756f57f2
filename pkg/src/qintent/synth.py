"""Seeded synthetic click logs built from intent-indicative query templates.

Stands in for real search click-through logs. Every record is drawn as:
intent from the mixture, locale from the locale mixture, a user whose role
searches for that intent often, a template for (intent, role, locale) filled
from Zipf-weighted lexicons, and finally a clicked document type that is
flipped to another intent's type with probability ``noise_rate``.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .text import DEFAULT_INTENTS, ClickRecord

INTENT_TO_TYPE = {
    "PEOPLE": "profile",
    "JOB": "job_posting",
    "COMPANY": "company_page",
    "GROUP": "group_page",
    "CONTENT": "article",
}

_SLOT = re.compile(r"\{(\w+)\}")

# Each entity class owns its own initial letters, so the first keystroke already
# tells which kind of entity a query starts with: first names a-e/j-m, titles
# r/t, skills s/q/w, companies g/i/n-p/u/v/z, topics f/h/y. Last names and cities
# only ever appear after another word and are unrestricted.
LEXICON: dict[str, list[str]] = {
    "first": (
        "maria james john mary michael jennifer david linda elizabeth barbara joseph jessica charles daniel "
        "karen matthew anthony lisa mark betty margaret andrew ashley joshua kimberly kevin emily brian donna "
        "carol amanda jason melissa edward deborah jeffrey laura cynthia eric kathleen jonathan amy larry "
        "angela justin anna brandon carlos aisha elena david jorge lucia"
    ).split(),
    "last": (
        "smith johnson williams brown jones garcia miller davis rodriguez martinez hernandez lopez gonzalez "
        "wilson anderson thomas taylor moore jackson martin lee perez thompson white harris sanchez clark "
        "ramirez lewis robinson walker young allen king wright scott torres nguyen hill flores green adams "
        "nelson baker hall rivera campbell mitchell carter roberts gomez phillips evans turner diaz parker "
        "patel kim chen wang singh"
    ).split(),
    "title": [
        "registered nurse", "recruiter", "research scientist", "real estate agent", "receptionist",
        "retail manager", "risk analyst", "robotics engineer", "restaurant manager", "radiologist",
        "teacher", "truck driver", "technical writer", "tax accountant", "test engineer", "translator",
        "therapist", "tutor", "technical program manager", "talent acquisition partner",
    ],
    "skill": [
        "sql", "sales", "seo", "statistics", "spanish", "scrum", "swift", "scala", "sketch", "spark",
        "solidworks", "sap", "welding", "wordpress", "writing", "web design", "quickbooks",
        "quantitative analysis", "six sigma", "spreadsheets",
    ],
    "company": [
        "google", "ibm", "intel", "indeed", "infosys", "netflix", "nvidia", "nike", "nestle", "oracle",
        "openai", "paypal", "pfizer", "pinterest", "pepsico", "uber", "unilever", "visa", "verizon",
        "vmware", "zoom", "zillow", "zendesk", "general motors", "goldman sachs", "procter & gamble",
    ],
    "city": [
        "new york", "san francisco", "london", "seattle", "chicago", "boston", "austin", "toronto",
        "berlin", "paris", "dublin", "singapore", "sydney", "bangalore", "denver", "amsterdam", "munich",
    ],
    "topic": [
        "fintech", "future of work", "freelancing", "fundraising", "food tech", "founder stories",
        "healthcare innovation", "hiring trends", "hybrid work", "housing market", "hr tech",
        "health and wellness", "year in review", "youth employment", "yield farming",
    ],
}

# Intent-indicative templates shared by every user: the trailing keyword names
# the vertical. These are the "per-intent templates" of the generator config.
TEMPLATES: dict[str, list[str]] = {
    "PEOPLE": ["{first} {last}", "{first} {last}", "{first} {last} {company}", "{first} {last} {title}"],
    "JOB": ["{title} jobs", "{skill} jobs", "{company} jobs", "{title} jobs in {city}"],
    "COMPANY": ["{company} inc", "{company} headquarters", "{company} {city} office"],
    "GROUP": ["{topic} group", "{skill} meetup", "{topic} community"],
    "CONTENT": ["{topic} news", "{skill} tips", "{company} news"],
}

# Keyword-free queries led by each entity class. What they mean depends on who
# types them (see READINGS): the intent follows the leading entity.
CLASS_TEMPLATES: dict[str, list[str]] = {
    "title": ["{title}", "{title}", "{title} {company}", "{title} {city}", "{title} {skill}"],
    "company": ["{company}", "{company}", "{company} {title}", "{company} {city}", "{company} {topic}"],
    "skill": ["{skill}", "{skill}", "{skill} {title}", "{skill} {topic}", "{skill} {company}"],
    "topic": ["{topic}", "{topic}", "{topic} {skill}", "{topic} {company}", "{topic} {city}"],
}

# Role -> leading entity class -> intent. A recruiter typing a job title wants
# candidates but typing a company checks its openings; a job seeker reads the
# same queries the other way round (openings for a title, people to ask for a
# referral at a company). Analysts research companies, networkers look for
# groups and readers for articles.
READINGS: dict[str, dict[str, str]] = {
    "recruiter": {"title": "PEOPLE", "company": "JOB", "skill": "PEOPLE", "topic": "GROUP"},
    "seeker": {"title": "JOB", "company": "PEOPLE", "skill": "JOB", "topic": "CONTENT"},
    "analyst": {"title": "JOB", "company": "COMPANY", "skill": "COMPANY", "topic": "CONTENT"},
    "networker": {"title": "GROUP", "company": "COMPANY", "skill": "GROUP", "topic": "GROUP"},
    "reader": {"title": "CONTENT", "company": "CONTENT", "skill": "CONTENT", "topic": "CONTENT"},
}

# How often each role searches for each intent.
ROLES: dict[str, dict[str, float]] = {
    "recruiter": {"PEOPLE": 0.75, "JOB": 0.156, "COMPANY": 0.013, "GROUP": 0.068, "CONTENT": 0.013},
    "seeker": {"PEOPLE": 0.156, "JOB": 0.75, "COMPANY": 0.013, "GROUP": 0.013, "CONTENT": 0.068},
    "analyst": {"PEOPLE": 0.03, "JOB": 0.095, "COMPANY": 0.75, "GROUP": 0.03, "CONTENT": 0.095},
    "networker": {"PEOPLE": 0.063, "JOB": 0.012, "COMPANY": 0.163, "GROUP": 0.75, "CONTENT": 0.012},
    "reader": {"PEOPLE": 0.156, "JOB": 0.031, "COMPANY": 0.031, "GROUP": 0.032, "CONTENT": 0.75},
}

# Keyword translations for the multilingual preset (entity fillers are shared).
LOCALE_WORDS: dict[str, dict[str, str]] = {
    "en": {},
    "fr": {"jobs": "emplois", "in": "a", "inc": "sa", "headquarters": "siege", "office": "bureau",
           "group": "groupe", "community": "communaute", "news": "actualites", "tips": "conseils",
           "meetup": "rencontre"},
    "de": {"jobs": "stellen", "in": "in", "inc": "ag", "headquarters": "zentrale", "office": "buro",
           "group": "gruppe", "community": "gemeinschaft", "news": "nachrichten", "tips": "tipps",
           "meetup": "treffen"},
}

# Words whose entity class depends on the market: each group of four is a
# company in one locale, a skill in another and a topic in the third.
_HOMOGRAPH_GROUPS = (
    ["orange", "amber", "atlas", "sage"],
    ["mercury", "delta", "apex", "nova"],
    ["summit", "harbor", "pioneer", "zenith"],
)
HOMOGRAPHS: dict[str, dict[str, list[str]]] = {
    loc: {cls: _HOMOGRAPH_GROUPS[(i - shift) % 3] for i, cls in enumerate(("company", "skill", "topic"))}
    for shift, loc in enumerate(("en", "fr", "de"))
}


@dataclass
class SynthConfig:
    """Generator settings.

    A record for (intent, role, locale) uses the intent's keyword templates plus
    every class template that the role reads as that intent, with keywords
    translated for the locale.
    """

    mixture: dict[str, float] = field(default_factory=lambda: {k: 0.2 for k in DEFAULT_INTENTS})
    locales: dict[str, float] = field(default_factory=lambda: {"en": 1.0})
    templates: dict[str, list[str]] = field(default_factory=lambda: TEMPLATES)
    class_templates: dict[str, list[str]] = field(default_factory=lambda: CLASS_TEMPLATES)
    readings: dict[str, dict[str, str]] = field(default_factory=lambda: READINGS)
    roles: dict[str, dict[str, float]] = field(default_factory=lambda: ROLES)
    words: dict[str, dict[str, str]] = field(default_factory=dict)
    lexicon: dict[str, list[str]] = field(default_factory=lambda: LEXICON)
    homographs: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    homograph_rate: float = 0.0
    class_weight: int = 8  # repeats of each class template relative to a keyword template
    noise_rate: float = 0.0
    n_users: int = 30
    zipf: float = 0.9
    intent_types: dict[str, str] = field(default_factory=lambda: dict(INTENT_TO_TYPE))

    def templates_for(self, locale: str, intent: str, role: str | None = None) -> list[str]:
        out = list(self.templates.get(intent, []))
        if role is not None:
            for cls, tpls in self.class_templates.items():
                if self.readings.get(role, {}).get(cls) == intent:
                    out += list(tpls) * self.class_weight
        words = self.words.get(locale)
        if words:
            out = [" ".join(w for w in (words.get(t, t) for t in tpl.split(" ")) if w) for tpl in out]
        return out


class ClickLogSynthesizer:
    """Deterministic record stream for a (config, seed) pair, with bookkeeping.

    ``intent_counts`` tallies the template intent of every emitted record and
    ``clicked_counts`` the clicked document types after noise.
    """

    def __init__(self, config: SynthConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.intents = list(config.mixture)
        if not self.intents:
            raise ValueError("intent mixture is empty")
        for intent in self.intents:
            if intent not in config.intent_types:
                raise ValueError(f"no clicked document type for intent {intent!r}")
            for loc in config.locales:
                if not config.templates_for(loc, intent):
                    raise ValueError(f"no templates for intent {intent!r} in locale {loc!r}")
        self.role_names = list(config.roles) or ["any"]
        self.intent_counts: Counter = Counter()
        self.clicked_counts: Counter = Counter()
        self._weights = {slot: self._zipf(len(words)) for slot, words in config.lexicon.items()}
        self._cache: dict[tuple, list[str]] = {}

    def _zipf(self, n: int) -> np.ndarray:
        w = 1.0 / np.arange(1, n + 1) ** self.config.zipf
        return w / w.sum()

    def role_of(self, user: int) -> str:
        return self.role_names[user % len(self.role_names)]

    def _templates(self, loc: str, intent: str, role: str) -> list[str]:
        key = (loc, intent, role)
        if key not in self._cache:
            self._cache[key] = self.config.templates_for(loc, intent, role if self.config.roles else None)
        return self._cache[key]

    def _fill(self, template: str, loc: str, rng: np.random.Generator) -> str:
        cfg = self.config
        homographs = cfg.homographs.get(loc, {})

        def pick(m: re.Match) -> str:
            slot = m.group(1)
            local = homographs.get(slot)
            if local and rng.random() < cfg.homograph_rate:
                return local[rng.integers(len(local))]
            words = cfg.lexicon[slot]
            return words[rng.choice(len(words), p=self._weights[slot])]

        return _SLOT.sub(pick, template)

    def _user_sampler(self) -> list[tuple[np.ndarray, list[np.ndarray]]]:
        """Per intent: role probabilities and each role's user ids."""
        cfg = self.config
        R = len(self.role_names)
        members = [np.arange(r, cfg.n_users, R) for r in range(R)]
        out = []
        for intent in self.intents:
            w = np.array([cfg.roles.get(r, {}).get(intent, 0.0) if cfg.roles else 1.0 for r in self.role_names])
            w = w * np.array([len(m) for m in members], dtype=float)
            if w.sum() <= 0:
                w = np.array([len(m) for m in members], dtype=float)
            out.append((w / w.sum(), members))
        return out

    def generate(self, n: int) -> Iterator[ClickRecord]:
        cfg = self.config
        rng = np.random.default_rng([self.seed, 0x5EED])
        mix = np.array([cfg.mixture[i] for i in self.intents], dtype=float)
        mix /= mix.sum()
        locs = list(cfg.locales)
        lmix = np.array([cfg.locales[c] for c in locs], dtype=float)
        lmix /= lmix.sum()
        k = len(self.intents)
        sampler = self._user_sampler()
        for t in range(n):
            ii = int(rng.choice(k, p=mix))
            intent = self.intents[ii]
            loc = locs[int(rng.choice(len(locs), p=lmix))]
            role_p, members = sampler[ii]
            r = int(rng.choice(len(role_p), p=role_p))
            user = int(members[r][rng.integers(len(members[r]))])
            options = self._templates(loc, intent, self.role_names[r])
            text = " ".join(self._fill(options[rng.integers(len(options))], loc, rng).split())
            clicked = intent
            if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
                others = [x for x in self.intents if x != intent]
                clicked = others[int(rng.integers(len(others)))]
            self.intent_counts[intent] += 1
            self.clicked_counts[cfg.intent_types[clicked]] += 1
            yield ClickRecord(text, loc, f"u{user:05d}", cfg.intent_types[clicked], 1_600_000_000 + t)


def synth_click_log(config: SynthConfig, n: int, seed: int = 0) -> list[ClickRecord]:
    return list(ClickLogSynthesizer(config, seed).generate(n))


def typeahead_preset(noise_rate: float = 0.05) -> SynthConfig:
    """English typeahead logs with role-dependent entity queries."""
    return SynthConfig(noise_rate=noise_rate)


def complete_preset(noise_rate: float = 0.05) -> SynthConfig:
    return SynthConfig(noise_rate=noise_rate)


def multilingual_preset(noise_rate: float = 0.05) -> SynthConfig:
    """Three markets with translated keywords and market-dependent entity homographs."""
    return SynthConfig(
        locales={"en": 0.4, "fr": 0.3, "de": 0.3},
        words=LOCALE_WORDS,
        homographs=HOMOGRAPHS,
        homograph_rate=0.6,
        noise_rate=noise_rate,
    )


def mlm_corpus(n: int, seed: int = 0, config: SynthConfig | None = None) -> list[str]:
    """Unlabeled query-like sentences for masked-LM pre-training."""
    cfg = config or complete_preset(0.0)
    return [r.query for r in ClickLogSynthesizer(cfg, seed).generate(n)]
