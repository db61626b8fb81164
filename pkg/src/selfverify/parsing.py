"""Parsers for model output and the quote-to-offset locator.

Every parser in this module accepts arbitrary text and returns a declared
outcome; the only exception type raised on content (as opposed to misuse)
is AmbiguousVerdict, which callers treat as a keep-and-flag signal, not a
crash.

The locator resolves a model-returned quote to character offsets in the
source text through three stages: exact substring, case- and
whitespace-insensitive match, then a bounded fuzzy search that minimizes
edit distance normalized by the longer of quote and window.
"""

from __future__ import annotations

import re

from .core import EvidenceSpan, MatchKind, StatusLabel, normalize

# Fuzzy matching accepts a window w for quote q iff
#   editdist(q, w) / max(|q|, |w|) <= 1/5
# with |w| restricted to [ceil(0.8 |q|), floor(1.25 |q|)]. All comparisons
# are exact integer arithmetic; no floats are involved in selection.
FUZZY_THRESHOLD_NUM = 1
FUZZY_THRESHOLD_DEN = 5
WINDOW_MIN_NUM, WINDOW_MIN_DEN = 4, 5
WINDOW_MAX_NUM, WINDOW_MAX_DEN = 5, 4


class AmbiguousVerdict(Exception):
    """A verdict reply contained no recognizable yes/no token."""

    def __init__(self, text: str):
        super().__init__(f"no yes/no token in verdict reply: {text[:80]!r}")
        self.text = text


_BULLET_LINE_RE = re.compile(r"^\s*(?:[-*•·‣◦]+|\(?\d{1,3}[.)])\s+(.*\S)\s*$")

_SENTINEL_EXACT = {
    "none",
    "n/a",
    "na",
    "nil",
    "nothing",
    "none found",
    "none identified",
    "nothing else",
    "nothing missed",
    "no new items",
    "no others",
    "empty",
}
# "no medications", "no medications found", "no additional trial arms".
# A qualifier word licenses a multi-word noun; without one, only a single
# noun (optionally with a found/identified tail) counts, so legitimate
# values like "no improvement arm" survive.
_SENTINEL_RE = re.compile(
    r"^(?:there (?:are|were) )?no "
    r"(?:"
    r"(?:new|additional|other|further|missed|remaining)(?: \w+){1,3}"
    r"|"
    r"\w+(?: (?:were|was|are|is))?"
    r"(?: (?:found|identified|missed|mentioned|listed|present|extracted))?"
    r")$"
)


def _is_sentinel(line: str) -> bool:
    folded = normalize(line)
    return folded in _SENTINEL_EXACT or bool(_SENTINEL_RE.match(folded))


def parse_bulleted_list(text: str) -> list[str]:
    """Extract item strings from a (possibly bulleted) reply.

    Lines carrying a list marker (-, *, bullets, "3." or "3)") win; any
    preamble before the first marker is dropped. With no markers at all,
    every non-empty line is an item, except a first line ending in a colon,
    which is taken as preamble. A reply consisting of a single sentinel
    line ("none", "n/a", "no medications found", ...) yields an empty list.
    """
    lines = text.splitlines()
    items: list[str] = []
    saw_marker = False
    for line in lines:
        m = _BULLET_LINE_RE.match(line)
        if m:
            saw_marker = True
            items.append(m.group(1))
    if not saw_marker:
        stripped = [ln.strip() for ln in lines if ln.strip()]
        if stripped and stripped[0].endswith(":"):
            stripped = stripped[1:]
        items = stripped
    items = [it for it in items if normalize(it)]
    if len(items) == 1 and _is_sentinel(items[0]):
        return []
    return items


_PAREN_STATUS_RE = re.compile(r"^(?P<item>.*\S)\s*\((?P<status>[^()]+)\)\s*$")
_TRAILING_PAREN_RE = re.compile(r"\s*\([^)]*\)\s*$")

_STATUS_SYNONYMS: dict[str, StatusLabel] = {
    "active": StatusLabel.ACTIVE,
    "current": StatusLabel.ACTIVE,
    "currently taking": StatusLabel.ACTIVE,
    "taking": StatusLabel.ACTIVE,
    "ongoing": StatusLabel.ACTIVE,
    "continued": StatusLabel.ACTIVE,
    "continuing": StatusLabel.ACTIVE,
    "started": StatusLabel.ACTIVE,
    "new": StatusLabel.ACTIVE,
    "discontinued": StatusLabel.DISCONTINUED,
    "discontinue": StatusLabel.DISCONTINUED,
    "stopped": StatusLabel.DISCONTINUED,
    "stop": StatusLabel.DISCONTINUED,
    "held": StatusLabel.DISCONTINUED,
    "ceased": StatusLabel.DISCONTINUED,
    "dc'd": StatusLabel.DISCONTINUED,
    "dcd": StatusLabel.DISCONTINUED,
    "neither": StatusLabel.NEITHER,
    "unknown": StatusLabel.NEITHER,
    "unclear": StatusLabel.NEITHER,
    "n/a": StatusLabel.NEITHER,
    "none": StatusLabel.NEITHER,
    "not mentioned": StatusLabel.NEITHER,
}


def _fold_status(raw: str) -> StatusLabel | None:
    stripped = _TRAILING_PAREN_RE.sub("", raw)
    return _STATUS_SYNONYMS.get(normalize(stripped))


def parse_status_pairs(text: str) -> tuple[list[tuple[str, StatusLabel]], list[str]]:
    """Parse "item: status" lines into (item, label) pairs.

    Accepts "item: status", "item - status", and "item (status)" forms,
    folding common synonyms (stopped, current, ...). A line with no status,
    or one whose status token is unrecognized, keeps the item with
    StatusLabel.NEITHER and reports a warning. Returns (pairs, warnings).
    """
    pairs: list[tuple[str, StatusLabel]] = []
    warnings: list[str] = []
    for line in parse_bulleted_list(text):
        m = _PAREN_STATUS_RE.match(line)
        if m:
            status = _fold_status(m.group("status"))
            if status is not None:
                pairs.append((m.group("item"), status))
                continue
        if ":" in line:
            item, _, status_text = line.rpartition(":")
            item = item.strip()
            status = _fold_status(status_text)
            if item and status is not None:
                pairs.append((item, status))
            elif item:
                pairs.append((item, StatusLabel.NEITHER))
                warnings.append(
                    f"unrecognized status {status_text.strip()!r} for {item!r}; using neither"
                )
            else:
                pairs.append((status_text, StatusLabel.NEITHER))
                warnings.append(f"missing status for {status_text.strip()!r}; using neither")
            continue
        if " - " in line:
            item, _, status_text = line.rpartition(" - ")
            status = _fold_status(status_text)
            if item.strip() and status is not None:
                pairs.append((item.strip(), status))
                continue
        pairs.append((line, StatusLabel.NEITHER))
        warnings.append(f"missing status for {line.strip()!r}; using neither")
    return pairs, warnings


_QUOTE_OPENERS = "\"'“‘«`"
_QUOTE_CLOSERS = "\"'”’»`"


def _unwrap_quote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] in _QUOTE_OPENERS and s[-1] in _QUOTE_CLOSERS:
        return s[1:-1]
    return s


def parse_evidence(
    text: str, expected_values: list[str] | tuple[str, ...]
) -> tuple[dict[str, str], list[str]]:
    """Parse `item: "quote"` lines, aligning items to expected value keys.

    `expected_values` are normalized item values. Alignment is by exact
    normalized match first, then by unique substring containment. Quote text
    is unwrapped from surrounding straight or smart quotes but otherwise
    preserved verbatim, since it must be located in the source later.
    Returns ({expected_value: quote}, warnings); values with no usable line
    are simply absent.
    """
    expected = list(expected_values)
    mapping: dict[str, str] = {}
    warnings: list[str] = []
    for line in parse_bulleted_list(text):
        left, sep, right = line.partition(":")
        if not sep:
            warnings.append(f"evidence line without separator: {line[:60]!r}")
            continue
        key = normalize(left)
        if key not in expected:
            contains = [v for v in expected if len(key) >= 3 and (key in v or v in key)]
            if len(contains) == 1:
                key = contains[0]
            else:
                warnings.append(f"evidence line for unknown item {left.strip()!r}")
                continue
        quote = _unwrap_quote(right)
        if not quote:
            warnings.append(f"empty quote for {key!r}")
            continue
        if key in mapping:
            warnings.append(f"duplicate evidence line for {key!r}; keeping the first")
            continue
        mapping[key] = quote
    return mapping, warnings


_YES_TOKENS = frozenset({"yes", "correct", "keep", "true"})
_NO_TOKENS = frozenset({"no", "incorrect", "remove", "false"})
_WORD_RE = re.compile(r"[a-z']+")


def parse_verdict(text: str) -> bool:
    """Read a keep/discard verdict; the first decisive token wins.

    True for yes/correct/keep/true, False for no/incorrect/remove/false.
    Raises AmbiguousVerdict when no token from either set appears.
    """
    for token in _WORD_RE.findall(text.casefold()):
        if token in _YES_TOKENS:
            return True
        if token in _NO_TOKENS:
            return False
    raise AmbiguousVerdict(text)


_ICD9_RE = re.compile(r"(?<![0-9A-Za-z.])(\d{2,3}(?:\.\d{1,2})?)(?!\.?\d)(?![A-Za-z])")
_ICD10_RE = re.compile(
    r"(?<![0-9A-Za-z.])([A-Za-z]\d[0-9A-Za-z](?:\.[0-9A-Za-z]{1,4})?)(?!\.?[0-9A-Za-z])"
)


def parse_icd_codes(text: str, version: int) -> list[str]:
    """Scan free text for ICD-9 (nnn.nn) or ICD-10 (Ann.xxxx) codes.

    Codes are uppercased and deduplicated preserving first occurrence.
    """
    if version == 9:
        pattern = _ICD9_RE
    elif version == 10:
        pattern = _ICD10_RE
    else:
        raise ValueError(f"unsupported ICD version {version}")
    seen: set[str] = set()
    codes: list[str] = []
    for m in pattern.finditer(text):
        code = m.group(1).upper()
        if code not in seen:
            seen.add(code)
            codes.append(code)
    return codes


def _fold_char(c: str) -> str:
    low = c.lower()
    return low if len(low) == 1 else c


def fold_with_offsets(text: str) -> tuple[str, list[int], list[int]]:
    """Length-tracked fold: lowercase chars, collapse whitespace runs.

    Returns (folded, starts, ends) where folded[k] came from the original
    slice [starts[k], ends[k]). A whitespace run becomes one ' ' covering
    the whole run. This is the shared text-folding definition used by both
    the case-insensitive and fuzzy matching stages.
    """
    folded: list[str] = []
    starts: list[int] = []
    ends: list[int] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            j = i
            while j < n and text[j].isspace():
                j += 1
            folded.append(" ")
            starts.append(i)
            ends.append(j)
            i = j
        else:
            folded.append(_fold_char(text[i]))
            starts.append(i)
            ends.append(i + 1)
            i += 1
    return "".join(folded), starts, ends


def fold_quote(quote: str) -> str:
    """Fold a quote with the same rules as the document, trimmed at the ends."""
    folded, _, _ = fold_with_offsets(quote)
    return folded.strip()


def window_band(m: int) -> tuple[int, int]:
    """Inclusive [min, max] window lengths considered for a folded quote of length m."""
    lo = -(-m * WINDOW_MIN_NUM // WINDOW_MIN_DEN)
    hi = m * WINDOW_MAX_NUM // WINDOW_MAX_DEN
    return max(1, lo), hi


def passes_threshold(dist: int, m: int, length: int) -> bool:
    """dist / max(m, length) <= 1/5, evaluated exactly."""
    return dist * FUZZY_THRESHOLD_DEN <= max(m, length) * FUZZY_THRESHOLD_NUM


def _sellers_end_distances(needle: str, haystack: str) -> list[int]:
    """Best edit distance of `needle` against any substring ending at each position.

    Returns e where e[j] = min over s of editdist(needle, haystack[s:j]),
    j from 0 to len(haystack). Start positions are free, so row 0 is all
    zeros; this is the standard semi-global alignment.
    """
    m, n = len(needle), len(haystack)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        qc = needle[i - 1]
        for j in range(1, n + 1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (qc != haystack[j - 1]),
            )
        prev = cur
    return prev


def _distances_for_end(needle: str, haystack: str, end: int, max_len: int) -> list[int]:
    """Edit distance of `needle` to haystack[end-L:end] for L = 0..max_len.

    Computed as one alignment of the reversed needle against the reversed
    slice, so every window sharing this end point comes out of a single
    table. Returns dists indexed by window length.
    """
    lo = max(0, end - max_len)
    window = haystack[lo:end][::-1]
    rq = needle[::-1]
    w = len(window)
    prev = list(range(w + 1))
    for i in range(1, len(rq) + 1):
        cur = [i] + [0] * w
        qc = rq[i - 1]
        for k in range(1, w + 1):
            cur[k] = min(prev[k] + 1, cur[k - 1] + 1, prev[k - 1] + (qc != window[k - 1]))
        prev = cur
    return prev


def locate_quote(text: str, quote: str) -> EvidenceSpan:
    """Resolve a quote to character offsets in `text`.

    Stage 1: exact substring (leftmost). Stage 2: leftmost match ignoring
    case and whitespace runs. Stage 3: fuzzy search minimizing
    editdist / max(|quote|, |window|) over windows within the length band,
    accepted only at or under the 1/5 threshold; ties prefer the smaller
    normalized distance, then leftmost start, then smallest end. Offsets
    always index the original text.
    """
    if not quote or not quote.strip():
        return EvidenceSpan.not_found(quote)

    pos = text.find(quote)
    if pos >= 0:
        return EvidenceSpan(quote=quote, start=pos, end=pos + len(quote), match_kind=MatchKind.EXACT)

    folded, starts, ends = fold_with_offsets(text)
    nq = fold_quote(quote)
    if not nq:
        return EvidenceSpan.not_found(quote)
    k = folded.find(nq)
    if k >= 0:
        return EvidenceSpan(
            quote=quote,
            start=starts[k],
            end=ends[k + len(nq) - 1],
            match_kind=MatchKind.CASE_INSENSITIVE,
        )

    m = len(nq)
    n = len(folded)
    lo_len, hi_len = window_band(m)
    if lo_len > n:
        return EvidenceSpan.not_found(quote)

    end_dists = _sellers_end_distances(nq, folded)
    # Any window inside the band that passes the threshold has raw distance
    # at most floor(m/4), and the free-start distance at its end point is a
    # lower bound on that, so this filter loses nothing.
    raw_cap = m // 4
    best: tuple[int, int, int, int] | None = None  # (dist, max(m, L), start, end)
    for end in range(1, n + 1):
        e_j = end_dists[end]
        if e_j > raw_cap:
            continue
        if best is not None and e_j * best[1] > best[0] * max(m, hi_len):
            continue
        by_len = _distances_for_end(nq, folded, end, min(hi_len, end))
        for length in range(lo_len, min(hi_len, end) + 1):
            dist = by_len[length]
            if not passes_threshold(dist, m, length):
                continue
            start = end - length
            denom = max(m, length)
            if best is None:
                best = (dist, denom, start, end)
                continue
            lhs = dist * best[1]
            rhs = best[0] * denom
            if lhs < rhs or (lhs == rhs and (start, end) < (best[2], best[3])):
                best = (dist, denom, start, end)
    if best is None:
        return EvidenceSpan.not_found(quote)
    _, _, s, e = best
    return EvidenceSpan(
        quote=quote, start=starts[s], end=ends[e - 1], match_kind=MatchKind.FUZZY
    )
