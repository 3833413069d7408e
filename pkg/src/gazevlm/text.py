"""Canonical findings list, the toy vocabulary, and the fixed answer format.

Every answer string has the same shape: four reserved gaze placeholders,
the literal ``Answer:`` marker, then one ``<finding>: yes|no`` clause per
finding in canonical order. The 14 findings follow the common chest-X-ray
label set and are frozen here; the README carries the same table.
"""

from .errors import ValidationError

N_FINDINGS = 14

# Canonical finding order. Index in this tuple == index in the label vector.
FINDINGS = (
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "enlarged_cardiomediastinum",
    "fracture",
    "lung_lesion",
    "lung_opacity",
    "no_finding",
    "pleural_effusion",
    "pleural_other",
    "pneumonia",
    "pneumothorax",
    "support_devices",
)

PAD = "<pad>"
IMG = "<img>"
EOS = "<eos>"
GAZE_PLACEHOLDERS = ("<st1>", "<st2>", "<st3>", "<st4>")
ANSWER_MARKER = "Answer:"
YES = "yes"
NO = "no"

# Fixed instruction prompt shared by every sample.
PROMPT_WORDS = ("Question:", "report", "the", "findings")

# Token table: specials, placeholders, answer template words, prompt words.
TOKENS = (
    (PAD, IMG, EOS)
    + GAZE_PLACEHOLDERS
    + (ANSWER_MARKER, YES, NO)
    + tuple(f"{name}:" for name in FINDINGS)
    + PROMPT_WORDS
)

TOKEN_TO_ID = {tok: i for i, tok in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)

PAD_ID = TOKEN_TO_ID[PAD]
IMG_ID = TOKEN_TO_ID[IMG]
EOS_ID = TOKEN_TO_ID[EOS]
GAZE_PLACEHOLDER_IDS = tuple(TOKEN_TO_ID[t] for t in GAZE_PLACEHOLDERS)
ANSWER_MARKER_ID = TOKEN_TO_ID[ANSWER_MARKER]
YES_ID = TOKEN_TO_ID[YES]
NO_ID = TOKEN_TO_ID[NO]
FINDING_IDS = tuple(TOKEN_TO_ID[f"{name}:"] for name in FINDINGS)
PROMPT_IDS = tuple(TOKEN_TO_ID[w] for w in PROMPT_WORDS)

# Answer token layout: 4 placeholders, marker, 14 * (finding, yes/no), eos.
ANSWER_LEN = 4 + 1 + 2 * N_FINDINGS + 1


def validate_labels(labels):
    """Check a label vector is exactly 14 entries of 0/1; return a tuple of ints."""
    vals = tuple(int(v) for v in labels)
    if len(vals) != N_FINDINGS:
        raise ValidationError(f"label vector has {len(vals)} entries, want {N_FINDINGS}")
    if any(v not in (0, 1) for v in vals):
        raise ValidationError(f"label vector entries must be 0/1, got {vals}")
    return vals


def answer_token_ids(labels):
    """Token ids of the fixed-format answer for a 14-entry 0/1 label vector."""
    vals = validate_labels(labels)
    ids = list(GAZE_PLACEHOLDER_IDS) + [ANSWER_MARKER_ID]
    for fid, v in zip(FINDING_IDS, vals):
        ids.append(fid)
        ids.append(YES_ID if v else NO_ID)
    ids.append(EOS_ID)
    return ids


def render_answer(labels):
    """Canonical answer text for a label vector (the inverse of parsing)."""
    vals = validate_labels(labels)
    clauses = " ".join(
        f"{name}: {YES if v else NO}" for name, v in zip(FINDINGS, vals)
    )
    return "".join(GAZE_PLACEHOLDERS) + f" {ANSWER_MARKER} " + clauses


def detokenize_answer(ids):
    """Render answer token ids back to the canonical answer text.

    Only accepts sequences in the fixed format (placeholders, marker,
    14 finding/value pairs, eos); anything else raises ValidationError.
    """
    ids = list(ids)
    if len(ids) != ANSWER_LEN:
        raise ValidationError(f"answer has {len(ids)} tokens, want {ANSWER_LEN}")
    if tuple(ids[:4]) != GAZE_PLACEHOLDER_IDS:
        raise ValidationError("answer does not start with the four gaze placeholders")
    if ids[4] != ANSWER_MARKER_ID:
        raise ValidationError("missing Answer: marker token")
    if ids[-1] != EOS_ID:
        raise ValidationError("answer does not end with <eos>")
    labels = []
    for j in range(N_FINDINGS):
        fid, vid = ids[5 + 2 * j], ids[6 + 2 * j]
        if fid != FINDING_IDS[j]:
            raise ValidationError(f"clause {j + 1}: unexpected finding token id {fid}")
        if vid == YES_ID:
            labels.append(1)
        elif vid == NO_ID:
            labels.append(0)
        else:
            raise ValidationError(f"clause {j + 1}: value token is neither yes nor no")
    return render_answer(labels)
