"""Symbolic instruction vocabulary.

Instructions are short token strings such as ``PLACE REF_1 CELL_TL`` or
``RECOLOR REF_1 CELL_BR COLOR_3``. Each one parses into a list of
:class:`Directive` records that the data factory and the programmatic judge
share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_REFS = 8
VOCAB_SIZE = 32

CELLS = ("TL", "TR", "BL", "BR")
ACTIONS = ("PLACE", "RECOLOR", "MOVE", "REMOVE")

# 8 corners of the RGB cube pulled inwards; pairwise distance >= 195
PALETTE: tuple[tuple[int, int, int], ...] = tuple(
    (r, g, b) for r in (30, 225) for g in (30, 225) for b in (30, 225)
)
BACKGROUND = (128, 128, 128)

_TOKENS = (
    ["PAD"]
    + list(ACTIONS)
    + [f"REF_{k}" for k in range(1, MAX_REFS + 1)]
    + [f"CELL_{c}" for c in CELLS]
    + [f"COLOR_{i}" for i in range(len(PALETTE))]
)
VOCAB: tuple[str, ...] = tuple(_TOKENS + [f"RESERVED_{i}" for i in range(VOCAB_SIZE - len(_TOKENS))])
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_ID["PAD"]


class InstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Directive:
    """One instruction clause.

    ``arg`` is a palette index for RECOLOR, a destination cell for MOVE and
    ``None`` otherwise.
    """

    action: str
    ref_index: int
    cell: str
    arg: int | str | None = None

    def tokens(self) -> list[str]:
        out = [self.action, f"REF_{self.ref_index}", f"CELL_{self.cell}"]
        if self.action == "RECOLOR":
            out.append(f"COLOR_{self.arg}")
        elif self.action == "MOVE":
            out.append(f"CELL_{self.arg}")
        return out

    def to_dict(self) -> dict:
        return {"action": self.action, "ref_index": self.ref_index, "cell": self.cell, "arg": self.arg}

    @classmethod
    def from_dict(cls, d: dict) -> Directive:
        return cls(d["action"], int(d["ref_index"]), d["cell"], d.get("arg"))


@dataclass(frozen=True)
class Instruction:
    directives: tuple[Directive, ...] = field(default_factory=tuple)

    @property
    def token_ids(self) -> list[int]:
        return [TOKEN_ID[t] for d in self.directives for t in d.tokens()]

    @property
    def token_cells(self) -> list[str]:
        """Grid cell each token refers to: its clause's cell, or the destination for a MOVE target."""
        out = []
        for d in self.directives:
            cells = [d.cell] * len(d.tokens())
            if d.action == "MOVE":
                cells[-1] = d.arg
            out += cells
        return out

    @property
    def text(self) -> str:
        return " ".join(t for d in self.directives for t in d.tokens())

    @property
    def max_ref(self) -> int:
        return max((d.ref_index for d in self.directives), default=0)

    def check_refs(self, num_refs: int) -> None:
        if self.max_ref > num_refs:
            raise InstructionError(f"instruction references REF_{self.max_ref} but only {num_refs} references given")

    @classmethod
    def from_tokens(cls, ids) -> Instruction:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < VOCAB_SIZE:
                raise InstructionError(f"token id {i} outside vocabulary of size {VOCAB_SIZE}")
            words.append(VOCAB[i])
        return cls.from_text(" ".join(words))

    @classmethod
    def from_text(cls, text: str) -> Instruction:
        words = [w for w in text.split() if w != "PAD"]
        directives = []
        i = 0

        def take(prefix: str) -> str:
            nonlocal i
            if i >= len(words) or not words[i].startswith(prefix):
                got = words[i] if i < len(words) else "end of instruction"
                raise InstructionError(f"expected {prefix}* at position {i}, got {got}")
            w = words[i][len(prefix):]
            i += 1
            return w

        while i < len(words):
            action = words[i]
            if action not in ACTIONS:
                raise InstructionError(f"unknown action {action!r} at position {i}")
            i += 1
            ref = int(take("REF_"))
            if not 1 <= ref <= MAX_REFS:
                raise InstructionError(f"REF_{ref} out of range")
            cell = take("CELL_")
            if cell not in CELLS:
                raise InstructionError(f"unknown cell CELL_{cell}")
            arg: int | str | None = None
            if action == "RECOLOR":
                arg = int(take("COLOR_"))
                if not 0 <= arg < len(PALETTE):
                    raise InstructionError(f"COLOR_{arg} out of range")
            elif action == "MOVE":
                arg = take("CELL_")
                if arg not in CELLS:
                    raise InstructionError(f"unknown cell CELL_{arg}")
            directives.append(Directive(action, ref, cell, arg))
        return cls(tuple(directives))
