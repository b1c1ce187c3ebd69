"""City longitude arithmetic probe for chat models.

An item such as ``"Paris + Beijing"`` is answered by adding or subtracting the
cities' longitudes, rounded to integers with west negative.  Prompts differ in
how much of that reasoning the demonstrations spell out.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .exceptions import AuthError, ProbeError, ValidationError

log = logging.getLogger(__name__)

INSTRUCTION = ('Concisely explain your steps and write your answer as an integer in the last sentence '
               'starting with "The answer is".')

# Accuracy (percent) of a GPT-4 run on 200 items, kept for comparison only.
REFERENCE_ACCURACY = {"ICL": 59.5, "InformativeCoT": 81.5, "PI_a": 70.5, "PI_b": 2.5, "PI_c": 66.0, "PI_d": 80.0}


class PromptStyle(str, Enum):
    ICL = "ICL"
    InformativeCoT = "InformativeCoT"
    PI_a = "PI_a"
    PI_b = "PI_b"
    PI_c = "PI_c"
    PI_d = "PI_d"


@dataclass(frozen=True)
class City:
    name: str
    longitude: int
    demographics: str


class CityTable:
    def __init__(self, cities: Sequence[City]):
        self.cities = tuple(cities)
        self._by_name = {c.name: c for c in self.cities}
        if len(self._by_name) != len(self.cities):
            raise ValidationError("duplicate city names")

    @classmethod
    def default(cls) -> "CityTable":
        with resources.files("cotbma.data").joinpath("cities.json").open() as fh:
            data = json.load(fh)
        return cls([City(c["name"], int(c["longitude"]), c["demographics"]) for c in data["cities"]])

    def __getitem__(self, name: str) -> City:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValidationError(f"unknown city {name!r}") from None

    def __len__(self) -> int:
        return len(self.cities)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cities]


@dataclass(frozen=True)
class CityEquation:
    lhs: str
    op: str
    rhs: str

    def __post_init__(self):
        if self.op not in "+-" or len(self.op) != 1:
            raise ValidationError(f"operator must be '+' or '-', got {self.op!r}")

    def truth(self, table: CityTable) -> int:
        a, b = table[self.lhs].longitude, table[self.rhs].longitude
        return a + b if self.op == "+" else a - b

    def __str__(self) -> str:
        return f"{self.lhs} {self.op} {self.rhs}"


@dataclass
class CityTask:
    demos: list[CityEquation]
    tests: list[CityEquation]


def all_equations(table: CityTable) -> list[CityEquation]:
    return [CityEquation(a, op, b) for a in table.names for b in table.names if a != b for op in "+-"]


def build_city_task(table: CityTable, n_demos: int, rng: np.random.Generator, n_tests: int = 200) -> CityTask:
    """Sample disjoint demo and test equations over pairs of distinct cities."""
    pool = all_equations(table)
    if n_demos < 0 or n_tests < 0 or n_demos + n_tests > len(pool):
        raise ValidationError(f"cannot draw {n_demos} demos and {n_tests} tests from {len(pool)} equations")
    idx = rng.permutation(len(pool))
    return CityTask([pool[i] for i in idx[:n_demos]], [pool[i] for i in idx[n_demos:n_demos + n_tests]])


def _rationale(eq: CityEquation, table: CityTable, style: PromptStyle) -> str:
    lhs, rhs = table[eq.lhs], table[eq.rhs]
    lon_l = f"{lhs.name} has longitude: {lhs.longitude}."
    lon_r = f"{rhs.name} has longitude: {rhs.longitude}."
    demo = f"{lhs.demographics} {rhs.demographics}"
    if style is PromptStyle.ICL:
        return ""
    if style is PromptStyle.InformativeCoT:
        return (f'Using the longitudes of cities, the equation "{eq}" translates as "{lhs.name}" = {lhs.longitude}, '
                f'"{rhs.name}" = {rhs.longitude}. Here the longitudes of the western hemisphere are negative numbers. '
                "And we round the coordinates to the nearest integer. This gives the result.")
    if style is PromptStyle.PI_a:
        return lon_l
    if style is PromptStyle.PI_b:
        return demo
    if style is PromptStyle.PI_c:
        return f"{demo} {lon_l}"
    return f"{demo} {lon_l} {lon_r}"


def render_demo(eq: CityEquation, table: CityTable, style: PromptStyle) -> str:
    why = _rationale(eq, table, PromptStyle(style))
    answer = f"The answer is {eq.truth(table)}."
    return f'Q: "{eq}"\nA: {why + " " if why else ""}{answer}'


def render_prompt(demos: Sequence[CityEquation], test: CityEquation, table: CityTable,
                  style: PromptStyle | str) -> str:
    style = PromptStyle(style)
    blocks = [render_demo(d, table, style) for d in demos]
    blocks.append(f'Q: "{test}"\nA: {INSTRUCTION}')
    return "\n\n".join(blocks)


_ANSWER = re.compile(r"The answer is\s*:?\s*([+\-−]?\s*\d+)")


def parse_answer(text: str) -> int | None:
    """Integer after the last "The answer is"; ``None`` when there is none."""
    hits = _ANSWER.findall(text or "")
    if not hits:
        return None
    return int(hits[-1].replace("−", "-").replace(" ", ""))


class ChatBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


class ChatClient:
    """Minimal client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, base_url: str | None = None, model: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 1.0,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL", "https://api.openai.com/v1")).rstrip("/")
        self.model = model or os.environ.get("COTBMA_MODEL", "gpt-4")
        self.api_key = api_key if api_key is not None else os.environ.get("OPENAI_API_KEY", "")
        self.max_retries = max_retries
        self.backoff = backoff
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, prompt: str) -> str:
        body = {"model": self.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                r = self._http.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
            else:
                if r.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({r.status_code})")
                if r.status_code == 429 or r.status_code >= 500:
                    last = ProbeError(f"HTTP {r.status_code}")
                elif r.status_code >= 400:
                    raise ProbeError(f"HTTP {r.status_code}: {r.text[:200]}")
                else:
                    return r.json()["choices"][0]["message"]["content"]
            log.warning("attempt %d failed: %s", attempt + 1, last)
            if attempt + 1 < self.max_retries:
                time.sleep(self.backoff * 2**attempt)
        raise ProbeError(f"giving up after {self.max_retries} attempts: {last}")


_TEST_Q = re.compile(r'Q: "([^"]+?) ([+-]) ([^"]+)"\nA: ' + re.escape(INSTRUCTION) + r"\s*$")


class MockChatClient:
    """Offline stand-in; by default it reads the test item and answers correctly."""

    def __init__(self, table: CityTable | None = None, responder: Callable[[str], str] | None = None):
        self.table = table or CityTable.default()
        self.responder = responder
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if self.responder is not None:
            return self.responder(prompt)
        m = _TEST_Q.search(prompt)
        if not m:
            return "I cannot tell."
        eq = CityEquation(m.group(1), m.group(2), m.group(3))
        lhs, rhs = self.table[eq.lhs], self.table[eq.rhs]
        return (f"{lhs.name} has longitude: {lhs.longitude}. {rhs.name} has longitude: {rhs.longitude}. "
                f"The answer is {eq.truth(self.table)}.")


@dataclass
class ItemResult:
    item: int
    equation: CityEquation
    truth: int
    parsed: int | None

    @property
    def correct(self) -> bool:
        return self.parsed == self.truth


@dataclass
class AccuracyReport:
    style: PromptStyle
    results: list[ItemResult]

    @property
    def accuracy(self) -> float:
        return sum(r.correct for r in self.results) / len(self.results) if self.results else 0.0

    @property
    def parse_failures(self) -> int:
        return sum(r.parsed is None for r in self.results)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item", "lhs", "op", "rhs", "truth", "parsed", "correct"])
        for r in self.results:
            w.writerow([r.item, r.equation.lhs, r.equation.op, r.equation.rhs, r.truth,
                        "" if r.parsed is None else r.parsed, int(r.correct)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"style": self.style.value, "items": len(self.results), "accuracy": self.accuracy,
                "parse_failures": self.parse_failures,
                "reference_accuracy_percent": REFERENCE_ACCURACY[self.style.value]}


def evaluate(task: CityTask, style: PromptStyle | str, client: ChatBackend, table: CityTable | None = None,
             max_workers: int = 4) -> AccuracyReport:
    """Query the backend once per test item, at most ``max_workers`` at a time."""
    style = PromptStyle(style)
    table = table or CityTable.default()

    def one(i: int) -> ItemResult:
        eq = task.tests[i]
        reply = client.complete(render_prompt(task.demos, eq, table, style))
        return ItemResult(i, eq, eq.truth(table), parse_answer(reply))

    with ThreadPoolExecutor(max_workers=max(1, min(4, max_workers))) as pool:
        results = list(pool.map(one, range(len(task.tests))))
    return AccuracyReport(style, results)
