"""Expression trees for candidate densities.

Trees are immutable. ``Expression`` pairs a root ``Node`` with the dimensionality
of the input space; variables are ``x1`` .. ``xd`` (1-based).

Grammar accepted by :func:`parse` and produced by :func:`to_string`::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" NUMBER | "-" unary | primary
    primary := NUMBER | VAR | FUNC "(" expr ")" | "(" expr ")"

There is no negation node: ``-t`` becomes ``Sub(Const(0), t)`` unless ``t`` is a
bare literal, in which case the sign belongs to the constant.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArityError, DimensionMismatch, ExpressionSyntaxError, UnknownSymbol

logger = logging.getLogger(__name__)


class Op(str, Enum):
    ADD = "+"
    SUB = "-"
    MUL = "*"
    DIV = "/"
    EXP = "exp"
    LOG = "log"
    POW2 = "square"
    POW3 = "cube"
    COS = "cos"
    SIN = "sin"
    CONST = "const"
    VAR = "var"


BINARY_OPS = (Op.ADD, Op.SUB, Op.MUL, Op.DIV)
UNARY_OPS = (Op.EXP, Op.LOG, Op.POW2, Op.POW3, Op.COS, Op.SIN)
ARITY = {**{op: 2 for op in BINARY_OPS}, **{op: 1 for op in UNARY_OPS}, Op.CONST: 0, Op.VAR: 0}
FUNCTION_NAMES = {op.value: op for op in UNARY_OPS}

# Largest constant magnitude the search may create; keeps every tree printable.
MAX_CONSTANT = 1e12


def is_valid_constant(value: float) -> bool:
    return bool(np.isfinite(value)) and abs(value) <= MAX_CONSTANT


# Operator sets by name, used by configuration files.
OPERATOR_ALIASES = {
    "+": Op.ADD, "add": Op.ADD,
    "-": Op.SUB, "sub": Op.SUB,
    "*": Op.MUL, "mul": Op.MUL,
    "/": Op.DIV, "div": Op.DIV,
    "exp": Op.EXP, "log": Op.LOG,
    "pow2": Op.POW2, "square": Op.POW2,
    "pow3": Op.POW3, "cube": Op.POW3,
    "cos": Op.COS, "sin": Op.SIN,
}

_UNARY_FUNCS: Dict[Op, Callable[[np.ndarray], np.ndarray]] = {
    Op.EXP: np.exp,
    Op.LOG: np.log,
    Op.POW2: np.square,
    Op.POW3: lambda a: a * a * a,
    Op.COS: np.cos,
    Op.SIN: np.sin,
}

_BINARY_FUNCS: Dict[Op, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    Op.ADD: np.add,
    Op.SUB: np.subtract,
    Op.MUL: np.multiply,
    Op.DIV: np.divide,
}


@dataclass(frozen=True)
class Node:
    op: Op
    children: Tuple["Node", ...] = ()
    value: float = 0.0
    index: int = 0
    size: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.children) != ARITY[self.op]:
            raise ArityError(
                f"{self.op.value} takes {ARITY[self.op]} argument(s), got {len(self.children)}"
            )
        object.__setattr__(self, "size", 1 + sum(c.size for c in self.children))

    @property
    def is_leaf(self) -> bool:
        return not self.children


def const(value: float) -> Node:
    return Node(Op.CONST, value=float(value))


def var(index: int) -> Node:
    return Node(Op.VAR, index=int(index))


def unary(op: Op, child: Node) -> Node:
    return Node(op, (child,))


def binary(op: Op, left: Node, right: Node) -> Node:
    return Node(op, (left, right))


@dataclass(frozen=True)
class Expression:
    root: Node
    var_count: int

    def __post_init__(self):
        if self.var_count < 1:
            raise DimensionMismatch("an expression needs at least one input dimension")
        for _, node in iter_nodes(self.root):
            if node.op is Op.VAR and not 1 <= node.index <= self.var_count:
                raise UnknownSymbol(f"x{node.index} is not declared for d={self.var_count}")

    @property
    def complexity(self) -> int:
        return self.root.size

    def __str__(self) -> str:
        return to_string(self)


# --------------------------------------------------------------------------- traversal

Path = Tuple[int, ...]


def iter_nodes(node: Node, path: Path = ()) -> Iterator[Tuple[Path, Node]]:
    """Pre-order walk yielding (path, node); a path is the child index sequence."""
    yield path, node
    for i, child in enumerate(node.children):
        yield from iter_nodes(child, path + (i,))


def subtree_at(node: Node, path: Path) -> Node:
    for i in path:
        node = node.children[i]
    return node


def replace_at(node: Node, path: Path, new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(node.children)
    children[head] = replace_at(children[head], rest, new)
    return Node(node.op, tuple(children), node.value, node.index)


def variables(e: Expression) -> List[int]:
    return sorted({n.index for _, n in iter_nodes(e.root) if n.op is Op.VAR})


def reindex(e: Expression, mapping: Sequence[int], var_count: int) -> Expression:
    """Rename local variable ``x(i+1)`` to ``x(mapping[i])`` in a d=var_count space."""

    def walk(node: Node) -> Node:
        if node.op is Op.VAR:
            return var(mapping[node.index - 1])
        if node.is_leaf:
            return node
        return Node(node.op, tuple(walk(c) for c in node.children))

    return Expression(walk(e.root), var_count)


# --------------------------------------------------------------------------- parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<punct>[-+*/(),]))"
)
_VAR_RE = re.compile(r"x([1-9]\d*)")


class _Parser:
    def __init__(self, text: str, var_count: Optional[int]):
        self.text = text
        self.var_count = var_count
        self.tokens = self._tokenize(text)
        self.pos = 0
        self.max_index = 0

    @staticmethod
    def _tokenize(text: str) -> List[Tuple[str, str, int]]:
        """Token kind, text and UTF-8 byte offset into the input."""

        def byte_offset(index: int) -> int:
            return len(text[:index].encode("utf-8"))

        tokens = []
        offset = 0
        while offset < len(text):
            if text[offset:].strip() == "":
                break
            match = _TOKEN_RE.match(text, offset)
            if match is None or match.end() == offset:
                bad = offset + (len(text[offset:]) - len(text[offset:].lstrip()))
                raise ExpressionSyntaxError(f"unexpected character {text[bad]!r}", byte_offset(bad))
            kind = match.lastgroup
            tokens.append((kind, match.group(kind), byte_offset(match.start(kind))))
            offset = match.end()
        tokens.append(("end", "", byte_offset(len(text))))
        return tokens

    def peek(self) -> Tuple[str, str, int]:
        return self.tokens[self.pos]

    def take(self) -> Tuple[str, str, int]:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, value: str) -> None:
        kind, text, offset = self.take()
        if text != value or kind != "punct":
            raise ExpressionSyntaxError(f"expected {value!r}, found {text or 'end of input'!r}", offset)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, offset = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {text!r}", offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "punct":
            op = Op.ADD if self.take()[1] == "+" else Op.SUB
            node = binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "punct":
            op = Op.MUL if self.take()[1] == "*" else Op.DIV
            node = binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "punct" and text == "-":
            self.take()
            if self.peek()[0] == "number":
                _, number, offset = self.take()
                return self.literal("-" + number, offset)
            return binary(Op.SUB, const(0.0), self.unary())
        return self.primary()

    def literal(self, text: str, offset: int) -> Node:
        value = float(text)
        if not np.isfinite(value):
            raise ExpressionSyntaxError(f"literal {text} is not finite", offset)
        return const(value)

    def primary(self) -> Node:
        kind, text, offset = self.take()
        if kind == "number":
            return self.literal(text, offset)
        if kind == "ident":
            if self.peek()[1] == "(" and self.peek()[0] == "punct":
                return self.call(text, offset)
            match = _VAR_RE.fullmatch(text)
            if match is None:
                if text in FUNCTION_NAMES:
                    raise ExpressionSyntaxError(f"function {text} needs parentheses", offset)
                raise UnknownSymbol(f"unknown symbol {text!r} at offset {offset}")
            index = int(match.group(1))
            if self.var_count is not None and index > self.var_count:
                raise UnknownSymbol(f"{text} is not declared for d={self.var_count} (offset {offset})")
            self.max_index = max(self.max_index, index)
            return var(index)
        if kind == "punct" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", offset)

    def call(self, name: str, offset: int) -> Node:
        if name not in FUNCTION_NAMES:
            raise UnknownSymbol(f"unknown function {name!r} at offset {offset}")
        self.expect("(")
        args = []
        if self.peek()[1] != ")":
            args.append(self.expr())
            while self.peek()[1] == "," and self.peek()[0] == "punct":
                self.take()
                args.append(self.expr())
        self.expect(")")
        if len(args) != 1:
            raise ArityError(f"{name} takes 1 argument, got {len(args)} (offset {offset})")
        return unary(FUNCTION_NAMES[name], args[0])


def parse(text: str, var_count: Optional[int] = None) -> Expression:
    """Parse an expression string.

    When ``var_count`` is omitted the dimensionality is the highest variable index
    that appears (at least 1).
    """
    parser = _Parser(text, var_count)
    root = parser.parse()
    return Expression(root, var_count if var_count is not None else max(1, parser.max_index))


# --------------------------------------------------------------------------- printing

_PRECEDENCE = {Op.ADD: 1, Op.SUB: 1, Op.MUL: 2, Op.DIV: 2}
_ATOM = 3


def format_constant(value: float) -> str:
    if not np.isfinite(value):
        raise ValueError(f"cannot print non-finite constant {value}")
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def _precedence(node: Node) -> int:
    return _PRECEDENCE.get(node.op, _ATOM)


def _format(node: Node) -> str:
    if node.op is Op.CONST:
        return format_constant(node.value)
    if node.op is Op.VAR:
        return f"x{node.index}"
    if node.op in FUNCTION_NAMES.values():
        return f"{node.op.value}({_format(node.children[0])})"
    left, right = node.children
    prec = _precedence(node)
    left_text = _format(left)
    right_text = _format(right)
    if _precedence(left) < prec:
        left_text = f"({left_text})"
    if _precedence(right) <= prec:
        right_text = f"({right_text})"
    return f"{left_text} {node.op.value} {right_text}"


def to_string(e: Expression) -> str:
    return _format(e.root)


# --------------------------------------------------------------------------- evaluation

def _evaluate(node: Node, points: np.ndarray) -> np.ndarray:
    if node.op is Op.CONST:
        return np.full(points.shape[0], node.value)
    if node.op is Op.VAR:
        return points[:, node.index - 1]
    if len(node.children) == 1:
        return _UNARY_FUNCS[node.op](_evaluate(node.children[0], points))
    left, right = node.children
    return _BINARY_FUNCS[node.op](_evaluate(left, points), _evaluate(right, points))


def evaluate_batch(e: Expression, points) -> np.ndarray:
    """Evaluate rowwise over an (n, d) matrix. IEEE semantics, no exceptions."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != e.var_count:
        raise DimensionMismatch(f"expected points of shape (n, {e.var_count}), got {points.shape}")
    with np.errstate(all="ignore"):
        return np.asarray(_evaluate(e.root, points), dtype=np.float64)


def evaluate(e: Expression, point) -> float:
    point = np.asarray(point, dtype=np.float64).ravel()
    if point.shape[0] != e.var_count:
        raise DimensionMismatch(f"expected a point with {e.var_count} components, got {point.shape[0]}")
    return float(evaluate_batch(e, point[None, :])[0])


def complexity(e: Expression) -> int:
    return e.root.size


# --------------------------------------------------------------------------- simplification

def _is_const(node: Node, value: Optional[float] = None) -> bool:
    return node.op is Op.CONST and (value is None or node.value == value)


def _fold(node: Node, children: Tuple[Node, ...]) -> Optional[Node]:
    values = [np.array([c.value]) for c in children]
    with np.errstate(all="ignore"):
        if len(values) == 1:
            result = _UNARY_FUNCS[node.op](values[0])[0]
        else:
            result = _BINARY_FUNCS[node.op](values[0], values[1])[0]
    if not is_valid_constant(result):
        return None
    return const(float(result))


def _simplify(node: Node) -> Node:
    if node.is_leaf:
        return node
    children = tuple(_simplify(c) for c in node.children)
    if all(_is_const(c) for c in children):
        folded = _fold(node, children)
        if folded is not None:
            return folded
    op = node.op
    if op is Op.ADD:
        if _is_const(children[1], 0.0):
            return children[0]
        if _is_const(children[0], 0.0):
            return children[1]
    elif op is Op.SUB:
        if _is_const(children[1], 0.0):
            return children[0]
    elif op is Op.MUL:
        if _is_const(children[1], 1.0):
            return children[0]
        if _is_const(children[0], 1.0):
            return children[1]
    elif op is Op.DIV:
        if _is_const(children[1], 1.0):
            return children[0]
    elif op is Op.EXP and children[0].op is Op.LOG:
        return children[0].children[0]
    elif op is Op.LOG and children[0].op is Op.EXP:
        return children[0].children[0]
    if children == node.children:
        return node
    return Node(op, children)


def simplify(e: Expression) -> Expression:
    """Constant folding plus identity removal; never grows the tree."""
    return Expression(_simplify(e.root), e.var_count)


# --------------------------------------------------------------------------- generation

LEAF_PROBABILITY = 0.3
VAR_PROBABILITY = 0.5


def random_constant(rng: np.random.Generator) -> float:
    magnitude = 10.0 ** rng.uniform(-2.0, 1.0)
    return float(magnitude if rng.random() < 0.5 else -magnitude)


def random_leaf(d: int, rng: np.random.Generator) -> Node:
    if rng.random() < VAR_PROBABILITY:
        return var(int(rng.integers(1, d + 1)))
    return const(random_constant(rng))


def _grow(budget: int, d: int, rng: np.random.Generator, unary_ops, binary_ops) -> Node:
    if budget <= 1 or rng.random() < LEAF_PROBABILITY:
        return random_leaf(d, rng)
    choices = list(unary_ops) + (list(binary_ops) if budget >= 3 else [])
    if not choices:
        return random_leaf(d, rng)
    op = choices[int(rng.integers(len(choices)))]
    if ARITY[op] == 1:
        return unary(op, _grow(budget - 1, d, rng, unary_ops, binary_ops))
    left_budget = int(rng.integers(1, budget - 1))
    right_budget = budget - 1 - left_budget
    return binary(
        op,
        _grow(left_budget, d, rng, unary_ops, binary_ops),
        _grow(right_budget, d, rng, unary_ops, binary_ops),
    )


def random_node(d: int, max_size: int, rng: np.random.Generator, operators=None) -> Node:
    operators = tuple(operators) if operators is not None else BINARY_OPS + UNARY_OPS
    unary_ops = [op for op in UNARY_OPS if op in operators]
    binary_ops = [op for op in BINARY_OPS if op in operators]
    return _grow(max(1, int(max_size)), d, rng, unary_ops, binary_ops)


def random_expression(d: int, max_size: int, rng: np.random.Generator, operators=None) -> Expression:
    """Grow-style random tree with at most ``max_size`` nodes."""
    return Expression(random_node(d, max_size, rng, operators), d)


def parse_operators(text: str) -> Tuple[Op, ...]:
    """Parse a comma separated operator list such as ``+,-,*,/,exp,pow2``."""
    ops = []
    for name in (part.strip() for part in text.split(",")):
        if not name:
            continue
        if name not in OPERATOR_ALIASES:
            raise UnknownSymbol(f"unknown operator {name!r}")
        if OPERATOR_ALIASES[name] not in ops:
            ops.append(OPERATOR_ALIASES[name])
    return tuple(ops)
