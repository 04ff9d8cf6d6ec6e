"""Coefficient sets from a restricted expression language.

User-defined problems declare drift, diffusion and costs as expressions in
``t, x, x_d, v, v_d`` (terminal cost in ``x``) built from arithmetic and the
bounded smooth primitives sin, cos, tanh and exp.  Derivatives are produced
symbolically, so the declarations stay consistent by construction and the
finite-difference audit remains meaningful.
"""

from __future__ import annotations

import numpy as np
import sympy

from .errors import ConfigurationError
from .model import CoefficientSet

_T, _X, _XD, _V, _VD = sympy.symbols("t x x_d v v_d")
_SYMBOLS = {"t": _T, "x": _X, "x_d": _XD, "v": _V, "v_d": _VD}
_FUNCTIONS = {"sin": sympy.sin, "cos": sympy.cos, "tanh": sympy.tanh, "exp": sympy.exp}
_ALLOWED_FUNCS = tuple(_FUNCTIONS.values())


def _parse(text: str, allowed_symbols) -> sympy.Expr:
    try:
        expr = sympy.parse_expr(text, local_dict={**_SYMBOLS, **_FUNCTIONS})
    except (SyntaxError, TypeError, ValueError, sympy.SympifyError) as exc:
        raise ConfigurationError(f"cannot parse coefficient expression {text!r}: {exc}") from exc
    stray = expr.free_symbols - set(allowed_symbols)
    if stray:
        raise ConfigurationError(
            f"expression {text!r} uses unknown symbols {sorted(map(str, stray))}"
        )
    for f in expr.atoms(sympy.Function):
        if not isinstance(f, _ALLOWED_FUNCS):
            raise ConfigurationError(
                f"expression {text!r} uses function {f.func}; allowed: sin, cos, tanh, exp"
            )
    return expr


def _lambdify(expr: sympy.Expr, args):
    fn = sympy.lambdify(args, expr, modules="numpy")

    def wrapped(*values):
        return np.asarray(fn(*values), dtype=float)

    return wrapped


def coefficients_from_expressions(
    drift: str,
    diffusion: str,
    running_cost: str,
    terminal_cost: str,
    *,
    bounds: dict[str, float] | None = None,
    diffusion_xd_floor: float = 1e-6,
) -> CoefficientSet:
    """Build a coefficient set, with all state derivatives derived
    symbolically, from four expression strings."""
    full_args = (_T, _X, _XD, _V, _VD)
    exprs = {
        "drift": _parse(drift, full_args),
        "diffusion": _parse(diffusion, full_args),
        "running_cost": _parse(running_cost, full_args),
    }
    terminal = _parse(terminal_cost, (_X,))
    fields: dict = {}
    for name, expr in exprs.items():
        fields[name] = _lambdify(expr, full_args)
        fields[f"{name}_x"] = _lambdify(sympy.diff(expr, _X), full_args)
        fields[f"{name}_xd"] = _lambdify(sympy.diff(expr, _XD), full_args)
        fields[f"{name}_xx"] = _lambdify(sympy.diff(expr, _X, 2), full_args)
        fields[f"{name}_xxd"] = _lambdify(sympy.diff(expr, _X, _XD), full_args)
        fields[f"{name}_xdxd"] = _lambdify(sympy.diff(expr, _XD, 2), full_args)
    fields["terminal_cost"] = _lambdify(terminal, (_X,))
    fields["terminal_x"] = _lambdify(sympy.diff(terminal, _X), (_X,))
    fields["terminal_xx"] = _lambdify(sympy.diff(terminal, _X, 2), (_X,))
    return CoefficientSet(
        bounds=dict(bounds or {}), diffusion_xd_floor=float(diffusion_xd_floor), **fields
    )
