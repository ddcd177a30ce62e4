"""Symbolic rule trees for sequencing and routing.

A rule is a binary expression tree over six arithmetic functions and ten
shop-floor terminals. Trees are stored as an immutable pre-order tuple of
:class:`Token` values; that tuple is also the body of the token sequence fed
to the sequence model (wrapped in ``START``/``END``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property, lru_cache
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import IndexOutOfRange, MalformedSequence, ParseError

DEFAULT_MAX_DEPTH = 8
CLAMP = 1e12


class Token(IntEnum):
    START = 0
    END = 1
    ADD = 2
    SUB = 3
    MUL = 4
    PDIV = 5
    MAX = 6
    MIN = 7
    NIQ = 8
    WIQ = 9
    MWT = 10
    PT = 11
    NPT = 12
    OWT = 13
    WKR = 14
    NOR = 15
    SLACK = 16
    TIS = 17

    @property
    def is_function(self) -> bool:
        return Token.ADD <= self <= Token.MIN

    @property
    def is_terminal(self) -> bool:
        return self >= Token.NIQ

    @property
    def symbol(self) -> str:
        return _SYMBOLS.get(self, self.name)


VOCAB_SIZE = len(Token)
FUNCTIONS: tuple[Token, ...] = tuple(t for t in Token if t.is_function)
TERMINALS: tuple[Token, ...] = tuple(t for t in Token if t.is_terminal)
PRIMITIVES: tuple[Token, ...] = FUNCTIONS + TERMINALS
TERMINAL_NAMES: tuple[str, ...] = tuple(t.name for t in TERMINALS)

_SYMBOLS = {
    Token.ADD: "+",
    Token.SUB: "-",
    Token.MUL: "*",
    Token.PDIV: "/",
    Token.MAX: "max",
    Token.MIN: "min",
}
_BY_SYMBOL = {**{t.name: t for t in PRIMITIVES}, **{s: t for t, s in _SYMBOLS.items()}}


class FeatureVector(NamedTuple):
    """Terminal values at one decision point, in token-id order."""

    NIQ: float
    WIQ: float
    MWT: float
    PT: float
    NPT: float
    OWT: float
    WKR: float
    NOR: float
    SLACK: float
    TIS: float


# --- protected arithmetic -------------------------------------------------
# Every node result is forced finite: +-inf from overflow becomes +-CLAMP.
# With finite inputs this also rules out NaN (inf - inf never happens).


def _fin(x: float) -> float:
    if -math.inf < x < math.inf:
        return x
    if x != x:
        return CLAMP
    return CLAMP if x > 0 else -CLAMP


def _add(a: float, b: float) -> float:
    return _fin(a + b)


def _sub(a: float, b: float) -> float:
    return _fin(a - b)


def _mul(a: float, b: float) -> float:
    return _fin(a * b)


def _pdiv(a: float, b: float) -> float:
    if b == 0:
        return 1.0
    return _fin(a / b)


_OPS: dict[Token, Callable[[float, float], float]] = {
    Token.ADD: _add,
    Token.SUB: _sub,
    Token.MUL: _mul,
    Token.PDIV: _pdiv,
    Token.MAX: max,
    Token.MIN: min,
}
_OP_NAMES = {
    Token.ADD: "_add",
    Token.SUB: "_sub",
    Token.MUL: "_mul",
    Token.PDIV: "_pdiv",
    Token.MAX: "max",
    Token.MIN: "min",
}


def subtree_end(nodes: Sequence[int], start: int) -> int:
    """Index one past the subtree rooted at ``start``."""
    need = 1
    i = start
    n = len(nodes)
    while need:
        if i >= n:
            raise MalformedSequence("unfinished expression")
        need += 1 if FUNCTION_IDS_LO <= nodes[i] <= FUNCTION_IDS_HI else -1
        i += 1
    return i


FUNCTION_IDS_LO = int(Token.ADD)
FUNCTION_IDS_HI = int(Token.MIN)


def check_prefix(nodes: Sequence[int]) -> None:
    """Raise :class:`MalformedSequence` unless ``nodes`` is one complete prefix expression."""
    if not nodes:
        raise MalformedSequence("empty expression")
    open_slots = 1
    for i, t in enumerate(nodes):
        if t < FUNCTION_IDS_LO or t > int(Token.TIS):
            raise MalformedSequence(f"token {t!r} at position {i} is not a function or terminal")
        if open_slots == 0:
            raise MalformedSequence(f"expression completed before position {i}")
        open_slots += 1 if t <= FUNCTION_IDS_HI else -1
    if open_slots:
        raise MalformedSequence(f"unfinished expression ({open_slots} open argument slots)")


@dataclass(frozen=True)
class ExprTree:
    """Immutable binary expression tree in pre-order."""

    nodes: tuple[Token, ...]

    def __post_init__(self) -> None:
        raw = tuple(int(t) for t in self.nodes)
        check_prefix(raw)
        object.__setattr__(self, "nodes", tuple(Token(t) for t in raw))

    @classmethod
    def leaf(cls, terminal: Token) -> "ExprTree":
        return cls((terminal,))

    @classmethod
    def parse(cls, text: str) -> "ExprTree":
        """Parse the infix notation produced by :meth:`infix`, e.g. ``*(min(PT, WKR), NIQ)``.

        Function names may be symbols (``+ - * / max min``) or token names
        (``ADD``, ``PDIV``...).
        """
        return cls(tuple(_parse_infix(text)))

    @property
    def size(self) -> int:
        return len(self.nodes)

    @cached_property
    def depth(self) -> int:
        return max(node_depths(self.nodes), default=0)

    @property
    def root(self) -> Token:
        return self.nodes[0]

    def __len__(self) -> int:
        return len(self.nodes)

    def __str__(self) -> str:
        return self.infix()

    def infix(self, max_depth: int | None = None) -> str:
        return infix_string(self, max_depth)

    def evaluate(self, f: Sequence[float]) -> float:
        return evaluate(self, f)

    def compiled(self) -> Callable[..., float]:
        """Fast equivalent of :func:`evaluate` taking the ten terminals as positional args."""
        return _compile(tuple(int(t) for t in self.nodes))

    def terminals(self) -> frozenset[Token]:
        return frozenset(t for t in self.nodes if t.is_terminal)


@dataclass(frozen=True)
class Heuristic:
    """A (sequencing, routing) rule pair, the unit of evolution."""

    sequencing: ExprTree
    routing: ExprTree

    @property
    def size(self) -> int:
        return self.sequencing.size + self.routing.size

    def rule(self, kind: str) -> ExprTree:
        if kind == "sequencing":
            return self.sequencing
        if kind == "routing":
            return self.routing
        raise ValueError(f"unknown rule kind {kind!r}")

    def replace(self, kind: str, tree: ExprTree) -> "Heuristic":
        if kind == "sequencing":
            return Heuristic(tree, self.routing)
        if kind == "routing":
            return Heuristic(self.sequencing, tree)
        raise ValueError(f"unknown rule kind {kind!r}")

    def to_json(self) -> dict:
        return {
            "sequencing": to_prefix_tokens(self.sequencing),
            "routing": to_prefix_tokens(self.routing),
            "infix": {"sequencing": self.sequencing.infix(), "routing": self.routing.infix()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Heuristic":
        return cls(from_prefix_tokens(obj["sequencing"]), from_prefix_tokens(obj["routing"]))


RULE_KINDS = ("sequencing", "routing")


def node_depths(nodes: Sequence[int]) -> list[int]:
    """Depth of every node, in pre-order."""
    depths = []
    stack: list[list[int]] = []  # [remaining children, depth of those children]
    for t in nodes:
        d = stack[-1][1] if stack else 0
        depths.append(d)
        if stack:
            stack[-1][0] -= 1
            if stack[-1][0] == 0:
                stack.pop()
        if FUNCTION_IDS_LO <= t <= FUNCTION_IDS_HI:
            stack.append([2, d + 1])
    return depths


def evaluate(tree: ExprTree, f: Sequence[float]) -> float:
    """Evaluate ``tree`` on a feature vector indexed in terminal order.

    Total over finite inputs: ``PDIV(a, 0) == 1`` and any overflowing node
    is clamped to +-1e12.
    """
    vals: list[float] = []
    for t in reversed(tree.nodes):
        if t >= Token.NIQ:
            vals.append(float(f[t - Token.NIQ]))
        else:
            a = vals.pop()
            b = vals.pop()
            vals.append(_OPS[t](a, b))
    return _fin(vals[0])


@lru_cache(maxsize=8192)
def _compile(nodes: tuple[int, ...]) -> Callable[..., float]:
    pos = 0

    def emit() -> str:
        nonlocal pos
        t = Token(nodes[pos])
        pos += 1
        if t.is_terminal:
            return t.name
        a = emit()
        b = emit()
        return f"{_OP_NAMES[t]}({a},{b})"

    body = emit()
    src = f"lambda {','.join(TERMINAL_NAMES)}: _fin({body})"
    env = {"_add": _add, "_sub": _sub, "_mul": _mul, "_pdiv": _pdiv, "_fin": _fin}
    return eval(src, env)  # noqa: S307 - source is built from a closed token set


def to_prefix_tokens(tree: ExprTree) -> list[int]:
    return [int(Token.START), *(int(t) for t in tree.nodes), int(Token.END)]


def from_prefix_tokens(seq: Iterable[int]) -> ExprTree:
    seq = list(seq)
    if len(seq) < 3 or seq[0] != Token.START or seq[-1] != Token.END:
        raise MalformedSequence("sequence must be START, expression..., END")
    return ExprTree(tuple(seq[1:-1]))


def subtree_at(tree: ExprTree, k: int) -> ExprTree:
    if not 0 <= k < tree.size:
        raise IndexOutOfRange(f"node index {k} outside [0, {tree.size})")
    return ExprTree(tree.nodes[k:subtree_end(tree.nodes, k)])


def all_subtrees(tree: ExprTree) -> list[ExprTree]:
    return [subtree_at(tree, k) for k in range(tree.size)]


def subtree_keys(nodes: Sequence[int]) -> list[tuple[int, ...]]:
    """Token tuple of the subtree rooted at every node (pre-order)."""
    nodes = tuple(int(t) for t in nodes)
    return [nodes[k:subtree_end(nodes, k)] for k in range(len(nodes))]


def infix_string(tree: ExprTree, max_depth: int | None = None) -> str:
    """Render as ``op(left, right)``; subtrees below ``max_depth`` become ``...``."""
    pos = 0
    nodes = tree.nodes

    def emit(depth: int) -> str:
        nonlocal pos
        if max_depth is not None and depth > max_depth:
            pos = subtree_end(nodes, pos)
            return "..."
        t = nodes[pos]
        pos += 1
        if t.is_terminal:
            return t.name
        a = emit(depth + 1)
        b = emit(depth + 1)
        return f"{t.symbol}({a}, {b})"

    return emit(0)


_TOKEN_RE = re.compile(r"\s*([A-Za-z_]+|[-+*/]|\(|\)|,)")


def _parse_infix(text: str) -> list[Token]:
    toks = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character at {pos} in {text!r}")
        toks.append(m.group(1))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    out: list[Token] = []
    i = 0

    def expr() -> None:
        nonlocal i
        if i >= len(toks):
            raise ParseError(f"unexpected end of {text!r}")
        name = toks[i]
        tok = _BY_SYMBOL.get(name, _BY_SYMBOL.get(name.lower()))
        if tok is None:
            raise ParseError(f"unknown symbol {name!r}")
        out.append(tok)
        i += 1
        if tok.is_function:
            for sep in ("(", None, ",", None, ")"):
                if sep is None:
                    expr()
                    continue
                if i >= len(toks) or toks[i] != sep:
                    raise ParseError(f"expected {sep!r} in {text!r}")
                i += 1

    expr()
    if i != len(toks):
        raise ParseError(f"trailing input in {text!r}")
    return out


# --- prefix validity --------------------------------------------------------


class PrefixStack:
    """Open argument slots of a partially generated prefix expression.

    Each entry is ``[remaining_children, depth_of_those_children]``. A fresh
    stack has one slot (the root) at depth 0; the expression is complete
    when the stack is empty.
    """

    __slots__ = ("pending", "max_depth")

    def __init__(self, max_depth: int = DEFAULT_MAX_DEPTH):
        self.pending: list[list[int]] = [[1, 0]]
        self.max_depth = max_depth

    @classmethod
    def from_prefix(cls, nodes: Iterable[int], max_depth: int = DEFAULT_MAX_DEPTH) -> "PrefixStack":
        st = cls(max_depth)
        for t in nodes:
            st.push(t)
        return st

    @property
    def complete(self) -> bool:
        return not self.pending

    @property
    def next_depth(self) -> int:
        return self.pending[-1][1]

    @property
    def open_slots(self) -> int:
        return sum(r for r, _ in self.pending)

    def push(self, token: int) -> None:
        if not self.pending:
            raise MalformedSequence("expression already complete")
        if not FUNCTION_IDS_LO <= token <= int(Token.TIS):
            raise MalformedSequence(f"token {token!r} cannot appear inside an expression")
        top = self.pending[-1]
        depth = top[1]
        top[0] -= 1
        if top[0] == 0:
            self.pending.pop()
        if token <= FUNCTION_IDS_HI:
            self.pending.append([2, depth + 1])

    def copy(self) -> "PrefixStack":
        st = PrefixStack(self.max_depth)
        st.pending = [list(p) for p in self.pending]
        return st


_ALL_PRIMITIVES = frozenset(PRIMITIVES)
_ONLY_TERMINALS = frozenset(TERMINALS)
_ONLY_END = frozenset({Token.END})


def valid_next_tokens(stack: PrefixStack) -> frozenset[Token]:
    """Tokens that keep the prefix well formed (and within the depth cap)."""
    if stack.complete:
        return _ONLY_END
    if stack.next_depth >= stack.max_depth:
        return _ONLY_TERMINALS
    return _ALL_PRIMITIVES


# --- random trees -----------------------------------------------------------


def random_tree(min_depth: int, max_depth: int, method: str, rng: np.random.Generator) -> ExprTree:
    """Draw a depth uniformly from [min_depth, max_depth] and build a grow/full tree."""
    if not 0 <= min_depth <= max_depth:
        raise ValueError("need 0 <= min_depth <= max_depth")
    if method not in ("grow", "full"):
        raise ValueError(f"unknown method {method!r}")
    target = int(rng.integers(min_depth, max_depth + 1))
    out: list[Token] = []
    n_func = len(FUNCTIONS)
    n_prim = len(PRIMITIVES)

    def build(depth: int) -> None:
        if depth == target:
            out.append(TERMINALS[int(rng.integers(len(TERMINALS)))])
            return
        if method == "full":
            tok = FUNCTIONS[int(rng.integers(n_func))]
        else:
            tok = PRIMITIVES[int(rng.integers(n_prim))]
        out.append(tok)
        if tok.is_function:
            build(depth + 1)
            build(depth + 1)

    build(0)
    return ExprTree(tuple(out))


def ramped_half_and_half(rng: np.random.Generator, min_depth: int = 2, max_depth: int = 6) -> ExprTree:
    method = "full" if rng.random() < 0.5 else "grow"
    return random_tree(min_depth, max_depth, method, rng)
