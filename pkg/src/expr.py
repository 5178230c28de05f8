"""
Expression Parser - Arithmetic expressions for scenario files

Parses the small arithmetic language used in scenario JSON for metric
entries, sheet parametrizations and differential-form coefficients, and
evaluates it either on scalar bindings (math) or on whole sample grids
(numpy).

Grammar (Pratt / precedence climbing):
    +, -        binding power 10, left associative
    *, /        binding power 20, left associative
    unary -, +  binds tighter than * and /, looser than ^
    ^           binding power 30, right associative, integer exponents
    f(a, ...)   sin cos tan exp log sqrt cosh sinh atan2 abs

So "-x^2" is "-(x^2)" and "2^3^2" is "2^(3^2)".
"""

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Dict, FrozenSet, Mapping, Tuple, Union

import numpy as np


class ExpressionError(ValueError):
    """Base class for expression parsing and evaluation failures."""


class ExpressionParseError(ExpressionError):
    """Malformed source text. Carries the byte offset and the expected tokens."""

    def __init__(self, message: str, source: str, offset: int, expected: FrozenSet[str]):
        self.source = source
        self.offset = offset
        self.expected = frozenset(expected)
        wanted = ", ".join(sorted(self.expected)) if self.expected else "nothing"
        super().__init__(f"{message} at offset {offset} in {source!r} (expected: {wanted})")


class UnboundVariableError(ExpressionError):
    """A variable (or function name) has no binding at evaluation time."""

    def __init__(self, name: str, source: str = ""):
        self.name = name
        where = f" in {source!r}" if source else ""
        super().__init__(f"Unbound name '{name}'{where}")


class UnknownFunctionError(UnboundVariableError):
    """A call names a function outside the supported set."""


class ExpressionDomainError(ExpressionError):
    """Evaluation left the real domain (log of nonpositive, division by zero...)."""

    def __init__(self, reason: str, subexpression: str):
        self.reason = reason
        self.subexpression = subexpression
        super().__init__(f"{reason} in subexpression {subexpression}")


# ----------------------------------------------------------------------------
# Syntax tree
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Number:
    value: float

    def to_text(self) -> str:
        return repr(float(self.value))


@dataclass(frozen=True)
class Variable:
    name: str

    def to_text(self) -> str:
        return self.name


@dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: "Node"

    def to_text(self) -> str:
        return f"({self.op}{self.operand.to_text()})"


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Node"
    right: "Node"

    def to_text(self) -> str:
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Node", ...]

    def to_text(self) -> str:
        return f"{self.func}({', '.join(a.to_text() for a in self.args)})"


Node = Union[Number, Variable, UnaryOp, BinaryOp, Call]

# name -> (arity, scalar implementation, array implementation)
FUNCTIONS: Dict[str, Tuple[int, Callable[..., float], Callable[..., Any]]] = {
    "sin": (1, math.sin, np.sin),
    "cos": (1, math.cos, np.cos),
    "tan": (1, math.tan, np.tan),
    "exp": (1, math.exp, np.exp),
    "log": (1, math.log, np.log),
    "sqrt": (1, math.sqrt, np.sqrt),
    "cosh": (1, math.cosh, np.cosh),
    "sinh": (1, math.sinh, np.sinh),
    "atan2": (2, math.atan2, np.arctan2),
    "abs": (1, abs, np.abs),
}

CONSTANTS = {"pi": math.pi}


# ----------------------------------------------------------------------------
# Tokenizer and parser
# ----------------------------------------------------------------------------

_TOKEN_PAT = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r"|(?P<bad>\S))"
)

_OPERAND_START = frozenset({"number", "identifier", "(", "-", "+"})
_AFTER_OPERAND = frozenset({"+", "-", "*", "/", "^", "end of input"})

_BINARY_LBP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}
_UNARY_RBP = 25


@dataclass(frozen=True)
class _Token:
    kind: str      # number | name | op | end
    text: str
    offset: int    # byte offset into the source


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = list(self._tokenize(source))
        self.pos = 0

    def _byte_offset(self, char_index: int) -> int:
        return len(self.source[:char_index].encode("utf-8"))

    def _tokenize(self, source: str):
        index = 0
        while True:
            match = _TOKEN_PAT.match(source, index)
            if match is None:
                break
            kind = match.lastgroup
            start = match.start(kind)
            if kind == "bad":
                raise ExpressionParseError(
                    f"Unexpected character {match.group(kind)!r}",
                    source, self._byte_offset(start), _OPERAND_START | _AFTER_OPERAND,
                )
            yield _Token(kind, match.group(kind), self._byte_offset(start))
            index = match.end()
        yield _Token("end", "", self._byte_offset(len(source)))

    @property
    def token(self) -> _Token:
        return self.tokens[self.pos]

    def _advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _fail(self, message: str, expected: FrozenSet[str]):
        raise ExpressionParseError(message, self.source, self.token.offset, expected)

    def _expect(self, text: str) -> _Token:
        if self.token.kind != "op" or self.token.text != text:
            self._fail(f"Expected '{text}'", frozenset({text}))
        return self._advance()

    def _lbp(self, tok: _Token) -> int:
        if tok.kind == "op":
            return _BINARY_LBP.get(tok.text, 0)
        return 0

    def parse(self) -> Node:
        if self.token.kind == "end":
            self._fail("Empty expression", _OPERAND_START)
        node = self.expression(0)
        if self.token.kind != "end":
            self._fail(f"Unexpected token {self.token.text!r}", _AFTER_OPERAND)
        return node

    def expression(self, rbp: int) -> Node:
        left = self.nud(self._advance())
        while rbp < self._lbp(self.token):
            left = self.led(self._advance(), left)
        return left

    def nud(self, tok: _Token) -> Node:
        if tok.kind == "number":
            return Number(float(tok.text))
        if tok.kind == "name":
            if self.token.kind == "op" and self.token.text == "(":
                return self._call(tok)
            return Variable(tok.text)
        if tok.kind == "op" and tok.text == "(":
            inner = self.expression(0)
            self._expect(")")
            return inner
        if tok.kind == "op" and tok.text in "+-":
            operand = self.expression(_UNARY_RBP)
            return UnaryOp("-", operand) if tok.text == "-" else operand
        self.pos -= 1
        what = "end of input" if tok.kind == "end" else f"token {tok.text!r}"
        self._fail(f"Unexpected {what}", _OPERAND_START)

    def led(self, tok: _Token, left: Node) -> Node:
        if tok.text == "^":
            # right associative
            return BinaryOp("^", left, self.expression(_BINARY_LBP["^"] - 1))
        return BinaryOp(tok.text, left, self.expression(_BINARY_LBP[tok.text]))

    def _call(self, name_tok: _Token) -> Node:
        self._expect("(")
        args = [self.expression(0)]
        while self.token.kind == "op" and self.token.text == ",":
            self._advance()
            args.append(self.expression(0))
        if self.token.kind != "op" or self.token.text != ")":
            self._fail("Unclosed call", frozenset({",", ")"}))
        self._advance()
        spec = FUNCTIONS.get(name_tok.text)
        if spec is not None and spec[0] != len(args):
            raise ExpressionParseError(
                f"{name_tok.text} takes {spec[0]} argument(s), got {len(args)}",
                self.source, name_tok.offset, frozenset({f"{spec[0]} argument(s)"}),
            )
        return Call(name_tok.text, tuple(args))


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

def _is_integral(value: float) -> bool:
    return math.isfinite(value) and float(value).is_integer()


def _eval_scalar(node: Node, bindings: Mapping[str, float], source: str) -> float:
    if isinstance(node, Number):
        return node.value
    if isinstance(node, Variable):
        if node.name in bindings:
            return float(bindings[node.name])
        if node.name in CONSTANTS:
            return CONSTANTS[node.name]
        raise UnboundVariableError(node.name, source)
    if isinstance(node, UnaryOp):
        return -_eval_scalar(node.operand, bindings, source)
    if isinstance(node, BinaryOp):
        a = _eval_scalar(node.left, bindings, source)
        b = _eval_scalar(node.right, bindings, source)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if b == 0.0:
                raise ExpressionDomainError("division by zero", node.to_text())
            return a / b
        if not _is_integral(b):
            raise ExpressionDomainError(f"non-integer exponent {b!r}", node.to_text())
        if a == 0.0 and b < 0:
            raise ExpressionDomainError("division by zero", node.to_text())
        try:
            return a ** int(b)
        except OverflowError:
            raise ExpressionDomainError("overflow", node.to_text()) from None
    # Call
    spec = FUNCTIONS.get(node.func)
    if spec is None:
        raise UnknownFunctionError(node.func, source)
    args = [_eval_scalar(a, bindings, source) for a in node.args]
    if node.func == "log" and args[0] <= 0.0:
        raise ExpressionDomainError("log of nonpositive value", node.to_text())
    if node.func == "sqrt" and args[0] < 0.0:
        raise ExpressionDomainError("sqrt of negative value", node.to_text())
    try:
        return float(spec[1](*args))
    except (OverflowError, ValueError) as exc:
        raise ExpressionDomainError(str(exc), node.to_text()) from None


def _eval_array(node: Node, bindings: Mapping[str, Any], source: str):
    if isinstance(node, Number):
        return np.float64(node.value)
    if isinstance(node, Variable):
        if node.name in bindings:
            return np.asarray(bindings[node.name], dtype=float)
        if node.name in CONSTANTS:
            return np.float64(CONSTANTS[node.name])
        raise UnboundVariableError(node.name, source)
    if isinstance(node, UnaryOp):
        return -_eval_array(node.operand, bindings, source)
    if isinstance(node, BinaryOp):
        a = _eval_array(node.left, bindings, source)
        b = _eval_array(node.right, bindings, source)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(b == 0.0):
                raise ExpressionDomainError("division by zero", node.to_text())
            return a / b
        if not np.all(np.isfinite(b)) or not np.all(np.equal(np.mod(b, 1.0), 0.0)):
            raise ExpressionDomainError("non-integer exponent", node.to_text())
        if np.any(np.logical_and(a == 0.0, b < 0)):
            raise ExpressionDomainError("division by zero", node.to_text())
        if np.ndim(b) == 0:
            return np.power(a, int(b))
        return np.power(a, b)
    spec = FUNCTIONS.get(node.func)
    if spec is None:
        raise UnknownFunctionError(node.func, source)
    args = [_eval_array(a, bindings, source) for a in node.args]
    if node.func == "log" and np.any(args[0] <= 0.0):
        raise ExpressionDomainError("log of nonpositive value", node.to_text())
    if node.func == "sqrt" and np.any(args[0] < 0.0):
        raise ExpressionDomainError("sqrt of negative value", node.to_text())
    with np.errstate(over="raise"):
        try:
            return spec[2](*args)
        except FloatingPointError:
            raise ExpressionDomainError("overflow", node.to_text()) from None


def _free_names(node: Node) -> FrozenSet[str]:
    if isinstance(node, Variable):
        return frozenset({node.name})
    if isinstance(node, UnaryOp):
        return _free_names(node.operand)
    if isinstance(node, BinaryOp):
        return _free_names(node.left) | _free_names(node.right)
    if isinstance(node, Call):
        names: FrozenSet[str] = frozenset()
        for arg in node.args:
            names |= _free_names(arg)
        return names
    return frozenset()


@dataclass(frozen=True)
class Expression:
    """
    A parsed expression: immutable syntax tree plus the source it came from.

    Instances are safe to share between threads; evaluation never mutates.
    """
    root: Node
    source: str

    @property
    def variables(self) -> FrozenSet[str]:
        """Free names, minus built-in constants."""
        return frozenset(n for n in _free_names(self.root) if n not in CONSTANTS)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def evaluate(self, bindings: Mapping[str, float]) -> float:
        return _eval_scalar(self.root, bindings, self.source)

    def evaluate_array(self, bindings: Mapping[str, Any], shape: Tuple[int, ...] = ()) -> np.ndarray:
        """
        Evaluate on numpy arrays (all bindings broadcast together).

        Args:
            bindings: name -> array or scalar
            shape: result is broadcast to this shape (constants included)

        Returns:
            Float array of the broadcast shape
        """
        value = np.asarray(_eval_array(self.root, bindings, self.source), dtype=float)
        if shape:
            return np.broadcast_to(value, shape).copy()
        return value

    def to_text(self) -> str:
        return self.root.to_text()

    def __str__(self) -> str:
        return self.to_text()


def parse(src: str) -> Expression:
    """
    Parse source text into an Expression.

    Raises:
        ExpressionParseError: malformed or empty input
    """
    if not isinstance(src, str):
        raise ExpressionParseError("Expression must be a string", str(src), 0, _OPERAND_START)
    return Expression(_Parser(src).parse(), src)


def evaluate(e: Expression, bindings: Mapping[str, float]) -> float:
    """Evaluate e with the given variable bindings (double precision)."""
    return e.evaluate(bindings)


def coerce(value: Union[str, float, int, Expression]) -> Expression:
    """Accept numbers from JSON as well as expression text."""
    if isinstance(value, Expression):
        return value
    if isinstance(value, bool):
        raise ExpressionParseError("Boolean is not an expression", str(value), 0, _OPERAND_START)
    if isinstance(value, (int, float)):
        return parse(repr(float(value)))
    return parse(value)
