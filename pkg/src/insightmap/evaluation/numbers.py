"""Numeric-claim extraction and normalization.

A number is an optional leading minus, an optional currency symbol, digits
(with thousands commas and/or a decimal part) and an optional magnitude
suffix or percent sign.  Four-digit plain tokens are classified as years
when they fall in [1900, 2100] or follow a month name or a temporal
preposition.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable

CURRENCY = "$€£¥"
MAGNITUDES = {
    "k": 10**3, "K": 10**3, "thousand": 10**3,
    "M": 10**6, "million": 10**6, "mn": 10**6,
    "B": 10**9, "bn": 10**9, "billion": 10**9,
    "T": 10**12, "tn": 10**12, "trillion": 10**12,
}
_WORD_MAGS = "thousand|million|billion|trillion"
_MONTHS = ("january|february|march|april|may|june|july|august|september|october|november|december|"
           "jan|feb|mar|apr|jun|jul|aug|sep|sept|oct|nov|dec")
_YEAR_CUES = re.compile(rf"(?:\b(?:{_MONTHS})\.?|\b(?:in|since|by|from|until|during))\s*$", re.I)

NUMBER_RE = re.compile(
    rf"""
    (?<![\w.,$€£¥])
    (?:(?<![\w.])(?P<sign>-))?
    (?P<cur>[{CURRENCY}])?
    (?P<digits>\d{{1,3}}(?:,\d{{3}})+(?:\.\d+)?|\d+(?:\.\d+)?)
    (?:
        (?P<pct>%|\s?percent\b|\s?per\ cent\b)
      | (?P<mag>[kKMBT]|bn|mn|tn)(?![A-Za-z0-9])
      | \s(?P<word>{_WORD_MAGS})\b
      | (?P<decade>s)(?![A-Za-z0-9])
    )?
    (?![\w%])
    """,
    re.X | re.I,
)
_ISO_DATE = re.compile(r"\b(\d{4})-(\d{2})-(\d{2})\b")


@dataclass(frozen=True)
class NumericClaim:
    raw: str
    normalized: float
    is_year: bool
    position: int
    percent: bool = False
    currency: bool = False


def _magnitude(m: re.Match) -> int:
    if m.group("word"):
        return MAGNITUDES[m.group("word").lower()]
    mag = m.group("mag")
    if mag:
        # single letters are case-sensitive apart from k; the regex is case-insensitive
        if mag in MAGNITUDES:
            return MAGNITUDES[mag]
        low = mag.lower()
        return MAGNITUDES.get(low, MAGNITUDES.get(mag.upper(), 1))
    return 1


def _claim(m: re.Match, text: str, offset: int = 0) -> NumericClaim | None:
    digits = m.group("digits")
    mag = m.group("mag")
    if mag and mag in ("m", "b", "t"):  # lowercase single letters are units, not magnitudes
        return None
    plain = (len(digits) == 4 and digits.isdigit() and not m.group("sign") and not m.group("cur")
             and not m.group("pct") and not mag and not m.group("word"))
    if m.group("decade") and not plain:
        return None
    value = float(Decimal(digits.replace(",", "")) * _magnitude(m))
    if m.group("sign"):
        value = -value + 0.0  # no negative zero
    is_year = plain and (1900 <= int(digits) <= 2100 or bool(_YEAR_CUES.search(text[:m.start()])))
    return NumericClaim(m.group(0).strip(), value, is_year, m.start() + offset,
                        percent=bool(m.group("pct")), currency=bool(m.group("cur")))


def extract_numbers(text: str) -> list[NumericClaim]:
    """All numeric claims in ``text`` in order of appearance."""
    claims: list[NumericClaim] = []
    masked = text
    for d in _ISO_DATE.finditer(text):
        claims.append(NumericClaim(d.group(1), float(d.group(1)), True, d.start()))
        masked = masked[:d.start()] + " " * (d.end() - d.start()) + masked[d.end():]
    for m in NUMBER_RE.finditer(masked):
        c = _claim(m, masked)
        if c is not None:
            claims.append(c)
    return sorted(claims, key=lambda c: c.position)


def _sig(value: float) -> str:
    return f"{value:.6g}"


def same_value(a: NumericClaim, b: NumericClaim) -> bool:
    if a.is_year or b.is_year:
        return a.is_year and b.is_year and a.raw == b.raw
    return _sig(a.normalized) == _sig(b.normalized)


def found_in(claim: NumericClaim, text: str, numbers: Iterable[NumericClaim] | None = None) -> bool:
    """Exact raw match, or a normalized-value match among the text's numbers."""
    if re.search(rf"(?<![\d.,]){re.escape(claim.raw)}(?![\d]|[.,]\d)", text):
        return True
    if claim.is_year:
        return False
    pool = extract_numbers(text) if numbers is None else numbers
    return any(same_value(claim, n) for n in pool)
