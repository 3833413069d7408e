"""Parse fixation logs and word-timestamped transcripts, align them in time,
and aggregate gaze at the sentence level.

File formats
------------
- ``fixations.csv``: header ``t_start_ms,t_end_ms,x_norm,y_norm``, one
  fixation per row, UTF-8, LF line endings. Coordinates are clamped to
  [0, 1] at parse time (eye trackers emit slight off-screen samples).
- ``transcript.jsonl``: one JSON object per line with fields
  ``sentence_id, word, t_start_ms, t_end_ms``.
- A session directory holds ``fixations.csv``, ``transcript.jsonl``,
  ``image.pgm`` (8-bit grayscale) and ``labels.csv`` (14 comma-separated
  0/1 values on one line).

All operations are pure functions over immutable inputs.
"""

import json
import logging
import os
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError
from .pgm import read_pgm
from .text import validate_labels

logger = logging.getLogger(__name__)

FIXATION_HEADER = "t_start_ms,t_end_ms,x_norm,y_norm"


@dataclass(frozen=True)
class FixationEvent:
    """One fixation: a stable-gaze interval with a normalized location."""

    t_start_ms: int
    t_end_ms: int
    x_norm: float
    y_norm: float

    @property
    def midpoint_ms(self):
        return (self.t_start_ms + self.t_end_ms) / 2.0

    @property
    def duration_ms(self):
        return self.t_end_ms - self.t_start_ms


@dataclass(frozen=True)
class TranscriptWord:
    """One spoken word with its sentence id and time interval."""

    sentence_id: int
    word: str
    t_start_ms: int
    t_end_ms: int


@dataclass(frozen=True)
class SentenceGazeGroup:
    """All fixations attributed to one sentence, with its temporal midpoint.

    ``samples`` may be empty: sentences spoken during gaze dropout keep
    their slot so downstream binning sees the full session timeline.
    """

    sentence_id: int
    t_mid_ms: int
    samples: tuple = ()


@dataclass(frozen=True)
class WordAlignment:
    """Result of assigning fixations to words by interval-midpoint containment."""

    words: tuple
    fixations_per_word: tuple  # tuple of fixation tuples, index-aligned with words
    unattributed: tuple


def _clamp01(value, what, line, path):
    if 0.0 <= value <= 1.0:
        return value
    clamped = min(1.0, max(0.0, value))
    logger.warning("%s:%d: %s=%g outside [0,1], clamped to %g", path, line, what, value, clamped)
    return clamped


def parse_fixations(path):
    """Parse a fixation CSV into FixationEvents sorted by t_start_ms.

    Raises ParseError (with line number) on malformed rows and
    ValidationError on rows whose t_end_ms precedes t_start_ms.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != FIXATION_HEADER:
        raise ParseError(f"bad header, want {FIXATION_HEADER!r}", path=path, line=1)
    events = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", path=path, line=lineno)
        try:
            t_start, t_end = int(parts[0]), int(parts[1])
            x, y = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise ParseError(f"bad field value ({exc})", path=path, line=lineno)
        if t_end < t_start:
            raise ValidationError(
                f"{path}:{lineno}: fixation ends at {t_end} before it starts at {t_start}"
            )
        x = _clamp01(x, "x_norm", lineno, path)
        y = _clamp01(y, "y_norm", lineno, path)
        events.append(FixationEvent(t_start, t_end, x, y))
    events.sort(key=lambda e: (e.t_start_ms, e.t_end_ms))
    return events


def parse_transcript(path):
    """Parse a transcript JSONL into TranscriptWords grouped by sentence.

    Words are returned grouped by ascending sentence_id and time-sorted
    within each sentence; overlapping word intervals within one sentence
    raise ValidationError.
    """
    words = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON ({exc.msg})", path=path, line=lineno)
            try:
                word = TranscriptWord(
                    sentence_id=int(rec["sentence_id"]),
                    word=str(rec["word"]),
                    t_start_ms=int(rec["t_start_ms"]),
                    t_end_ms=int(rec["t_end_ms"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record ({exc!r})", path=path, line=lineno)
            if word.sentence_id < 0:
                raise ValidationError(f"{path}:{lineno}: negative sentence_id")
            if word.t_end_ms < word.t_start_ms:
                raise ValidationError(
                    f"{path}:{lineno}: word {word.word!r} ends at {word.t_end_ms} "
                    f"before it starts at {word.t_start_ms}"
                )
            words.append(word)
    words.sort(key=lambda w: (w.sentence_id, w.t_start_ms, w.t_end_ms))
    for prev, cur in zip(words, words[1:]):
        if cur.sentence_id == prev.sentence_id and cur.t_start_ms < prev.t_end_ms:
            raise ValidationError(
                f"{path}: sentence {cur.sentence_id}: words {prev.word!r} and "
                f"{cur.word!r} overlap in time"
            )
    return words


def align_words(fixations, words):
    """Assign each fixation to the word whose interval contains its midpoint.

    Word intervals are half-open [t_start_ms, t_end_ms), so adjacent words
    never double-claim a fixation. A fixation whose midpoint lies in no
    word interval goes to the unattributed bucket; when words from
    different sentences overlap, the earliest word (in sorted order) wins,
    keeping the buckets a partition of the input fixations.
    """
    sorted_words = sorted(words, key=lambda w: (w.t_start_ms, w.t_end_ms, w.sentence_id))
    per_word = [[] for _ in sorted_words]
    unattributed = []
    for fx in sorted(fixations, key=lambda e: (e.t_start_ms, e.t_end_ms)):
        mid = fx.midpoint_ms
        target = None
        for i, w in enumerate(sorted_words):
            if w.t_start_ms <= mid < w.t_end_ms:
                target = i
                break
        if target is None:
            unattributed.append(fx)
        else:
            per_word[target].append(fx)
    return WordAlignment(
        words=tuple(sorted_words),
        fixations_per_word=tuple(tuple(b) for b in per_word),
        unattributed=tuple(unattributed),
    )


def _duration_weighted_midpoint(words):
    mids = [(w.t_start_ms + w.t_end_ms) / 2.0 for w in words]
    durs = [w.t_end_ms - w.t_start_ms for w in words]
    total = sum(durs)
    if total == 0:  # all zero-length words: fall back to the plain mean
        return int(round(sum(mids) / len(mids)))
    return int(round(sum(d * m for d, m in zip(durs, mids)) / total))


def aggregate_sentences(alignment):
    """Pool word-level fixations into one SentenceGazeGroup per sentence.

    Each group's samples are the time-sorted concatenation of its member
    words' fixations (possibly empty under gaze dropout); t_mid_ms is the
    duration-weighted midpoint of the sentence's word intervals. Groups
    are sorted by t_mid_ms.
    """
    by_sentence = {}
    for w, fxs in zip(alignment.words, alignment.fixations_per_word):
        by_sentence.setdefault(w.sentence_id, ([], []))
        by_sentence[w.sentence_id][0].append(w)
        by_sentence[w.sentence_id][1].extend(fxs)
    groups = []
    for sid, (ws, fxs) in by_sentence.items():
        samples = tuple(sorted(fxs, key=lambda e: (e.t_start_ms, e.t_end_ms)))
        groups.append(
            SentenceGazeGroup(
                sentence_id=sid,
                t_mid_ms=_duration_weighted_midpoint(ws),
                samples=samples,
            )
        )
    groups.sort(key=lambda g: (g.t_mid_ms, g.sentence_id))
    return groups


# ---------------------------------------------------------------------------
# Session directories and corpus manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionData:
    """One parsed session directory."""

    sample_id: str
    fixations: tuple
    words: tuple
    image: object = None  # (H, W) uint8 array
    labels: tuple = field(default=None)


def parse_labels_csv(path):
    """Read 14 comma-separated 0/1 values from a one-line CSV."""
    with open(path, "r", encoding="utf-8") as f:
        content = f.read().strip()
    try:
        return validate_labels(content.split(","))
    except (ValueError, ValidationError) as exc:
        raise ParseError(f"bad label file ({exc})", path=path, line=1)


def parse_session(session_dir):
    """Parse one ``session_<id>/`` directory into a SessionData."""
    sample_id = os.path.basename(os.path.normpath(session_dir))
    fixations = parse_fixations(os.path.join(session_dir, "fixations.csv"))
    words = parse_transcript(os.path.join(session_dir, "transcript.jsonl"))
    image = read_pgm(os.path.join(session_dir, "image.pgm"))
    labels = parse_labels_csv(os.path.join(session_dir, "labels.csv"))
    return SessionData(
        sample_id=sample_id,
        fixations=tuple(fixations),
        words=tuple(words),
        image=image,
        labels=labels,
    )


def session_time_span(session):
    """Half-open [t0, t1) covering all fixation and word intervals.

    Falls back to a unit span when the session is empty or instantaneous,
    so binning stays well-defined.
    """
    starts = [f.t_start_ms for f in session.fixations] + [w.t_start_ms for w in session.words]
    ends = [f.t_end_ms for f in session.fixations] + [w.t_end_ms for w in session.words]
    if not starts:
        return (0, 1)
    t0, t1 = min(starts), max(ends)
    if t1 <= t0:
        t1 = t0 + 1
    return (t0, t1)


def sentence_groups(session):
    """Full per-session pipeline: align words, then aggregate per sentence."""
    return aggregate_sentences(align_words(session.fixations, session.words))


def load_manifest(path):
    """Read a corpus manifest: one {"sample_id", "split"} record per line."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                entries.append((str(rec["sample_id"]), str(rec["split"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"bad manifest record ({exc!r})", path=path, line=lineno)
    return entries


def load_corpus(corpus_dir, split=None):
    """Parse every session listed in ``corpus_dir/manifest.jsonl``.

    Returns a list of SessionData in manifest order, optionally filtered
    to one split ("train", "val" or "test").
    """
    entries = load_manifest(os.path.join(corpus_dir, "manifest.jsonl"))
    sessions = []
    for sample_id, sample_split in entries:
        if split is not None and sample_split != split:
            continue
        sessions.append(parse_session(os.path.join(corpus_dir, sample_id)))
    return sessions
