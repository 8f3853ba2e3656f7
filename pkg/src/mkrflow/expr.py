"""Tiny closed grammar for periodic fields in config files.

An expression is a sum of terms ``c``, ``c * sin(arg)`` or ``c * cos(arg)``
where ``c`` is a numeric constant (products, quotients and unary signs of
numbers are allowed) and ``arg`` is an integer combination of the coordinate
names ``x1, y1, x2, y2``. A trigonometric term is read with the period built
in, so on a torus with periods ``L``::

    cos(x1 + 2*y2)  ->  cos(2 pi (x1 / L_x1 + 2 y2 / L_y2))

Anything else (names, attribute access, exponentiation, calls other than
sin/cos) is rejected, which keeps configs portable and side-effect free.
"""

import ast
import math

import numpy as np

TRIG = {"sin": np.sin, "cos": np.cos}


class ExpressionError(ValueError):
    pass


def _variables(n_complex):
    names = []
    for j in range(1, n_complex + 1):
        names += [f"x{j}", f"y{j}"]
    return names


def _number(node):
    """Numeric value of a constant subtree, or None if it is not constant."""
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        v = _number(node.operand)
        if v is None:
            return None
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div)):
        a, b = _number(node.left), _number(node.right)
        if a is None or b is None:
            return None
        if isinstance(node.op, ast.Add):
            return a + b
        if isinstance(node.op, ast.Sub):
            return a - b
        if isinstance(node.op, ast.Mult):
            return a * b
        if b == 0:
            raise ExpressionError("division by zero")
        return a / b
    return None


def _linear(node, names):
    """Integer coefficients of a linear combination of coordinates."""
    if isinstance(node, ast.Name):
        if node.id not in names:
            raise ExpressionError(f"unknown coordinate {node.id!r}; expected one of {names}")
        return {node.id: 1}
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        sign = -1 if isinstance(node.op, ast.USub) else 1
        return {k: sign * v for k, v in _linear(node.operand, names).items()}
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub)):
        left, right = _linear(node.left, names), _linear(node.right, names)
        sign = 1 if isinstance(node.op, ast.Add) else -1
        out = dict(left)
        for k, v in right.items():
            out[k] = out.get(k, 0) + sign * v
        return out
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Mult):
        for const, other in ((node.left, node.right), (node.right, node.left)):
            c = _number(const)
            if c is not None:
                if c != int(c):
                    raise ExpressionError("trigonometric arguments need integer coefficients")
                return {k: int(c) * v for k, v in _linear(other, names).items()}
    raise ExpressionError(f"not an integer combination of coordinates: {ast.unparse(node)!r}")


def _eval(node, grid, coords, names):
    c = _number(node)
    if c is not None:
        return np.full(grid.shape, c)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        v = _eval(node.operand, grid, coords, names)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub)):
        a = _eval(node.left, grid, coords, names)
        b = _eval(node.right, grid, coords, names)
        return a + b if isinstance(node.op, ast.Add) else a - b
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Mult, ast.Div)):
        right = _number(node.right)
        if isinstance(node.op, ast.Div):
            if right is None or right == 0:
                raise ExpressionError("division is only allowed by a nonzero constant")
            return _eval(node.left, grid, coords, names) / right
        left = _number(node.left)
        if left is not None:
            return left * _eval(node.right, grid, coords, names)
        if right is not None:
            return right * _eval(node.left, grid, coords, names)
        raise ExpressionError("products must have a constant factor")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in TRIG:
            raise ExpressionError("only sin(...) and cos(...) calls are allowed")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        coefs = _linear(node.args[0], names)
        phase = np.zeros(grid.shape)
        for name, k in coefs.items():
            axis = names.index(name)
            phase = phase + (2.0 * math.pi * k / grid.periods[axis]) * coords[axis]
        return TRIG[node.func.id](phase)
    raise ExpressionError(f"unsupported expression: {ast.unparse(node)!r}")


def evaluate(text, grid):
    """Sample the expression ``text`` on ``grid``; returns an array of ``grid.shape``."""
    try:
        tree = ast.parse(str(text).strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    names = _variables(grid.n_complex)
    out = _eval(tree.body, grid, grid.coords(), names)
    return np.broadcast_to(out, grid.shape).astype(float)
