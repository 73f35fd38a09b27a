"""Expression-tape differentiation engine.

Two ingredients:

* :class:`Var` -- a node in a dynamically built tape of numpy operations.
  A reverse sweep (:func:`backward`) accumulates exact gradients into every
  leaf it reaches.  Values are double-precision scalars or arrays; batching a
  whole collocation set through one tape is the intended usage.
* :class:`Jet` -- a truncated Taylor object whose components are themselves
  tape values.  Seeding jets on the *inputs* of a network yields exact first
  and second input derivatives that remain differentiable with respect to the
  parameters, which is what PDE residual losses need.

The generic functions (:func:`tanh`, :func:`exp`, ...) accept plain numpy
arrays, ``Var`` and ``Jet`` operands alike, so model code can be written once
and evaluated either numerically (fast inference) or symbolically (training).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _special

from . import kernels as _k

__all__ = [
    "Var",
    "Jet",
    "NonFiniteError",
    "UnsupportedOrderError",
    "ShapeError",
    "backward",
    "param_gradient",
    "input_derivatives",
    "seed_jets",
    "jet_pair_scope",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "powc",
    "tanh",
    "exp",
    "log",
    "sin",
    "cos",
    "erf",
    "gelu",
    "sqrt",
    "square",
    "smooth_abs",
    "matmul",
    "transpose",
    "column_stack",
    "take_slice",
    "reshape",
    "vsum",
    "vmean",
    "periodic_wrap",
    "value_of",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced a NaN or infinity during a checked evaluation."""


class UnsupportedOrderError(ValueError):
    """Requested input-derivative order is not available."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    """One tape node: a value, its parents and the local backward rule."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, value={self.value!r})"

    # arithmetic sugar; the free functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self, seed=None):
        backward(self, seed)


def _node(value, parents, backward_fn, op):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by primitive '{op}'")
    out = Var.__new__(Var)
    out.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
    out.grad = None
    out._parents = parents
    out._backward = backward_fn
    out._grad_owned = False
    return out


def _val(x):
    """Numeric payload of an operand (Var or plain)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def value_of(x):
    """Plain numpy view of a Var / Jet / array operand."""
    if isinstance(x, Jet):
        x = x.val
    return _val(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(node, g):
    # first contribution aliases the incoming buffer; a second contribution
    # breaks the alias (copy on write), after which additions are in place
    if node.grad is None:
        node.grad = g
    elif node._grad_owned:
        node.grad += g
    else:
        node.grad = node.grad + g
        node._grad_owned = True


def backward(out, seed=None):
    """Reverse sweep from ``out``; gradients land in each leaf's ``.grad``."""
    order = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# binary / unary primitives on Vars (with plain-operand short circuits)
# ---------------------------------------------------------------------------

def add(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_add(_as_jet(a), _as_jet(b))
    if isinstance(a, Var):
        if isinstance(b, Var):
            av, bv = a.value, b.value

            def bwd(g, a=a, b=b, ash=a.value.shape, bsh=b.value.shape):
                _accum(a, _unbroadcast(g, ash))
                _accum(b, _unbroadcast(g, bsh))

            return _node(av + bv, (a, b), bwd, "add")
        bv = _val(b)

        def bwd(g, a=a, ash=a.value.shape):
            _accum(a, _unbroadcast(g, ash))

        return _node(a.value + bv, (a,), bwd, "add")
    if isinstance(b, Var):
        return add(b, a)
    return _val(a) + _val(b)


def neg(a):
    if isinstance(a, Jet):
        return _jet_unary_linear(a, lambda c: neg(c), "neg")
    if isinstance(a, Var):

        def bwd(g, a=a):
            _accum(a, -g)

        return _node(-a.value, (a,), bwd, "neg")
    return -_val(a)


def sub(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_add(_as_jet(a), _jet_neg(_as_jet(b)))
    if isinstance(a, Var) or isinstance(b, Var):
        return add(a, neg(b)) if isinstance(b, Var) else add(a, -_val(b))
    return _val(a) - _val(b)


def mul(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_mul(_as_jet(a), _as_jet(b))
    if isinstance(a, Var):
        if isinstance(b, Var):

            def bwd(g, a=a, b=b):
                _accum(a, _unbroadcast(g * b.value, a.value.shape))
                _accum(b, _unbroadcast(g * a.value, b.value.shape))

            return _node(a.value * b.value, (a, b), bwd, "mul")
        bv = _val(b)

        def bwd(g, a=a, bv=bv):
            _accum(a, _unbroadcast(g * bv, a.value.shape))

        return _node(a.value * bv, (a,), bwd, "mul")
    if isinstance(b, Var):
        return mul(b, a)
    return _val(a) * _val(b)


def div(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_div(_as_jet(a), _as_jet(b))
    if isinstance(a, Var) or isinstance(b, Var):
        if isinstance(b, Var):
            out_v = _val(a) / b.value
            if isinstance(a, Var):

                def bwd(g, a=a, b=b, q=out_v):
                    _accum(a, _unbroadcast(g / b.value, a.value.shape))
                    _accum(b, _unbroadcast(-g * q / b.value, b.value.shape))

                return _node(out_v, (a, b), bwd, "div")

            def bwd(g, b=b, q=out_v):
                _accum(b, _unbroadcast(-g * q / b.value, b.value.shape))

            return _node(out_v, (b,), bwd, "div")
        return mul(a, 1.0 / _val(b))
    return _val(a) / _val(b)


def powc(a, p):
    """Power with a constant exponent."""
    p = float(p)
    if isinstance(a, Jet):
        return _jet_unary(
            a,
            powc(a.val, p),
            mul(p, powc(a.val, p - 1.0)),
            lambda: mul(p * (p - 1.0), powc(a.val, p - 2.0)),
            "pow",
        )
    if isinstance(a, Var):
        out_v = a.value ** p

        def bwd(g, a=a, p=p):
            _accum(a, g * (p * a.value ** (p - 1.0)))

        return _node(out_v, (a,), bwd, "pow")
    return _val(a) ** p


def square(a):
    if isinstance(a, Var):

        def bwd(g, a=a):
            _accum(a, g * (2.0 * a.value))

        return _node(a.value * a.value, (a,), bwd, "square")
    if isinstance(a, Jet):
        return mul(a, a)
    v = _val(a)
    return v * v


def sqrt(a):
    return powc(a, 0.5)


def _unary(a, fv, dfv, op):
    """Var unary helper: value ``fv`` and derivative-at-value ``dfv``."""

    def bwd(g, a=a, dfv=dfv):
        _accum(a, g * dfv)

    return _node(fv, (a,), bwd, op)


def tanh(a):
    if isinstance(a, Jet):
        return _tanh_jet(a)
    if isinstance(a, Var):
        fv, fp = _k.tanh_pair(a.value)
        return _unary(a, fv, fp, "tanh")
    return np.tanh(_val(a))


def _tanh_jet(u):
    """Fused tanh on a jet: one node per component, hand-written backwards.

    Component rules (f = tanh):  val -> f(v);  d_i -> f' v_i;
    s_ij -> f' v_ij + f'' v_i v_j, with f'' = -2 f f' and f''' = 2 f' (3 f^2 - 1)
    entering the backward of the second-derivative component.
    """
    vcomp = u.val
    pairs = set(u.d2)
    pairs.update(_pkey(i, j) for i in u.d1 for j in u.d1)
    pairs = [k for k in pairs if _pair_on(k)]
    v_is_var = isinstance(vcomp, Var)
    has_var = v_is_var or any(isinstance(c, Var) for c in u.d1.values()) or any(
        isinstance(c, Var) for c in u.d2.values()
    )
    vv = value_of(vcomp)
    need_fpp = bool(pairs) or (u.d1 and v_is_var)
    if need_fpp:
        fv, fp, fpp, _fppp = _k.tanh_quad(vv)
    else:
        fv, fp = _k.tanh_pair(vv)
        fpp = _fppp = None

    if not has_var:
        d1 = {i: fp * value_of(c) for i, c in u.d1.items()}
        d2 = {}
        for key in pairs:
            i, j = key
            sv = u.d2.get(key)
            di, dj = u.d1.get(i), u.d1.get(j)
            term = None
            if sv is not None:
                term = fp * value_of(sv)
            if di is not None and dj is not None:
                cross = fpp * (value_of(di) * value_of(dj))
                term = cross if term is None else term + cross
            if term is not None:
                d2[key] = term
        return Jet(fv, d1, d2)

    def val_bwd(g, v=vcomp, fp=fp):
        _accum(v, g * fp)

    out_val = _node(fv, (vcomp,) if v_is_var else (), val_bwd if v_is_var else None, "tanh")
    d1_vals = {i: value_of(c) for i, c in u.d1.items()}
    out_d1 = {}
    for i, c in u.d1.items():
        parents = tuple(p for p in (vcomp, c) if isinstance(p, Var))

        def d_bwd(g, v=vcomp, c=c, dv=d1_vals[i], fp=fp, fpp=fpp):
            if isinstance(c, Var):
                _accum(c, g * fp)
            if isinstance(v, Var):
                _accum(v, g * (fpp * dv))

        out_d1[i] = _node(fp * d1_vals[i], parents, d_bwd, "tanh_d")
    out_d2 = {}
    if pairs:
        fppp = _fppp
        for key in pairs:
            i, j = key
            sv = u.d2.get(key)
            di, dj = u.d1.get(i), u.d1.get(j)
            sv_val = value_of(sv) if sv is not None else None
            div = d1_vals.get(i)
            djv = d1_vals.get(j)
            have_cross = di is not None and dj is not None
            if sv_val is None and not have_cross:
                continue
            value = 0.0
            if sv_val is not None:
                value = fp * sv_val
            if have_cross:
                value = value + fpp * (div * djv)
            parents = tuple(p for p in {id(x): x for x in (vcomp, di, dj, sv) if isinstance(x, Var)}.values())

            def s_bwd(g, v=vcomp, sv=sv, di=di, dj=dj, sv_val=sv_val, div=div,
                      djv=djv, fp=fp, fpp=fpp, fppp=fppp, same=(i == j),
                      have_cross=have_cross):
                if isinstance(sv, Var):
                    _accum(sv, g * fp)
                if have_cross:
                    if same:
                        if isinstance(di, Var):
                            _accum(di, g * (2.0 * fpp * div))
                    else:
                        if isinstance(di, Var):
                            _accum(di, g * (fpp * djv))
                        if isinstance(dj, Var):
                            _accum(dj, g * (fpp * div))
                if isinstance(v, Var):
                    gv = fppp * (div * djv) if have_cross else 0.0
                    if sv_val is not None:
                        gv = gv + fpp * sv_val
                    _accum(v, g * gv)

            out_d2[key] = _node(value, parents, s_bwd, "tanh_dd")
    return Jet(out_val, out_d1, out_d2)


def exp(a):
    if isinstance(a, Jet):
        f = exp(a.val)
        return _jet_unary(a, f, f, lambda: f, "exp")
    if isinstance(a, Var):
        fv = np.exp(a.value)
        return _unary(a, fv, fv, "exp")
    return np.exp(_val(a))


def log(a):
    if isinstance(a, Jet):
        inv = div(1.0, a.val)
        return _jet_unary(a, log(a.val), inv, lambda: neg(mul(inv, inv)), "log")
    if isinstance(a, Var):
        return _unary(a, np.log(a.value), 1.0 / a.value, "log")
    return np.log(_val(a))


def sin(a):
    if isinstance(a, Jet):
        s = sin(a.val)
        return _jet_unary(a, s, cos(a.val), lambda: neg(s), "sin")
    if isinstance(a, Var):
        return _unary(a, np.sin(a.value), np.cos(a.value), "sin")
    return np.sin(_val(a))


def cos(a):
    if isinstance(a, Jet):
        c = cos(a.val)
        return _jet_unary(a, c, neg(sin(a.val)), lambda: neg(c), "cos")
    if isinstance(a, Var):
        return _unary(a, np.cos(a.value), -np.sin(a.value), "cos")
    return np.cos(_val(a))


def erf(a):
    if isinstance(a, Jet):
        v = a.val
        d = mul(2.0 / math.sqrt(math.pi), exp(neg(mul(v, v))))
        return _jet_unary(a, erf(v), d, lambda: mul(-2.0, mul(v, d)), "erf")
    if isinstance(a, Var):
        fv = _special.erf(a.value)
        d = (2.0 / math.sqrt(math.pi)) * np.exp(-a.value * a.value)
        return _unary(a, fv, d, "erf")
    return _special.erf(_val(a))


def _norm_pdf(x):
    return mul(_INV_SQRT2PI, exp(mul(-0.5, mul(x, x))))


def gelu(a):
    """Exact Gaussian-error gelu: x * Phi(x)."""
    if isinstance(a, Jet):
        x = a.val
        cdf = mul(0.5, add(1.0, erf(mul(_INV_SQRT2, x))))
        pdf = _norm_pdf(x)
        d = add(cdf, mul(x, pdf))
        return _jet_unary(
            a,
            mul(x, cdf),
            d,
            lambda: mul(pdf, sub(2.0, mul(x, x))),
            "gelu",
        )
    if isinstance(a, Var):
        fv, fp = _k.gelu_pair(a.value)
        return _unary(a, fv, fp, "gelu")
    xv = _val(a)
    return xv * 0.5 * (1.0 + _special.erf(_INV_SQRT2 * xv))


def smooth_abs(a, delta=1e-12):
    """sqrt(a^2 + delta^2) - delta; with delta=0 only safe when squared later."""
    if delta == 0.0:
        return sqrt(square(a))
    return sub(sqrt(add(square(a), delta * delta)), delta)


def periodic_wrap(a, period=2.0, low=-1.0):
    """Map onto [low, low+period) with unit derivative (exact periodicity)."""
    if isinstance(a, Jet):
        return Jet(periodic_wrap(a.val, period, low), dict(a.d1), dict(a.d2))
    if isinstance(a, Var):
        fv = np.remainder(a.value - low, period) + low

        def bwd(g, a=a):
            _accum(a, g)

        return _node(fv, (a,), bwd, "wrap")
    return np.remainder(_val(a) - low, period) + low


# ---------------------------------------------------------------------------
# structural primitives (Var only; jets handle them componentwise)
# ---------------------------------------------------------------------------

def matmul(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        if isinstance(b, Jet):
            raise ShapeError("matmul with a jet right operand is not supported")
        ja = _as_jet(a)
        return Jet(
            matmul(ja.val, b),
            {i: matmul(c, b) for i, c in ja.d1.items()},
            {k: matmul(c, b) for k, c in ja.d2.items()},
        )
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _val(a), _val(b)
        if av.shape[-1] != bv.shape[0]:
            raise ShapeError(f"matmul shapes {av.shape} x {bv.shape}")
        parents = tuple(x for x in (a, b) if isinstance(x, Var))

        def bwd(g, a=a, b=b, av=av, bv=bv):
            if isinstance(a, Var):
                _accum(a, g @ bv.T)
            if isinstance(b, Var):
                _accum(b, av.T @ g)

        return _node(av @ bv, parents, bwd, "matmul")
    return _val(a) @ _val(b)


def transpose(a):
    if isinstance(a, Jet):
        return Jet(
            transpose(a.val),
            {i: transpose(c) for i, c in a.d1.items()},
            {k: transpose(c) for k, c in a.d2.items()},
        )
    if isinstance(a, Var):

        def bwd(g, a=a):
            _accum(a, g.T)

        return _node(a.value.T, (a,), bwd, "transpose")
    return _val(a).T


def column_stack(cols):
    """Stack 1-d columns into an (N, K) matrix."""
    if any(isinstance(c, Jet) for c in cols):
        jets = [_as_jet(c) for c in cols]
        ref = [value_of(j.val) for j in jets]
        dims = set()
        pairs = set()
        for j in jets:
            dims.update(j.d1)
            pairs.update(j.d2)
        val = column_stack([j.val for j in jets])
        d1 = {
            i: column_stack([_or_zeros(j.d1.get(i), ref[k]) for k, j in enumerate(jets)])
            for i in dims
        }
        d2 = {
            ij: column_stack([_or_zeros(j.d2.get(ij), ref[k]) for k, j in enumerate(jets)])
            for ij in pairs
        }
        return Jet(val, d1, d2)
    if any(isinstance(c, Var) for c in cols):
        vals = [_val(c) for c in cols]
        parents = tuple(c for c in cols if isinstance(c, Var))

        def bwd(g, cols=cols):
            for k, c in enumerate(cols):
                if isinstance(c, Var):
                    _accum(c, g[:, k])

        return _node(np.column_stack(vals), parents, bwd, "column_stack")
    return np.column_stack([_val(c) for c in cols])


def take_slice(a, start, stop):
    """Contiguous 1-d slice of a flat vector."""
    if isinstance(a, Var):

        def bwd(g, a=a, start=start, stop=stop):
            full = np.zeros_like(a.value)
            full[start:stop] = g
            _accum(a, full)

        return _node(a.value[start:stop], (a,), bwd, "slice")
    return _val(a)[start:stop]


def reshape(a, shape):
    if isinstance(a, Jet):
        return Jet(
            reshape(a.val, shape),
            {i: reshape(c, shape) for i, c in a.d1.items()},
            {k: reshape(c, shape) for k, c in a.d2.items()},
        )
    if isinstance(a, Var):

        def bwd(g, a=a):
            _accum(a, g.reshape(a.value.shape))

        return _node(a.value.reshape(shape), (a,), bwd, "reshape")
    return _val(a).reshape(shape)


def vsum(a):
    if isinstance(a, Var):

        def bwd(g, a=a):
            _accum(a, np.full_like(a.value, float(g)))

        return _node(a.value.sum(), (a,), bwd, "sum")
    return _val(a).sum()


def vmean(a):
    if isinstance(a, Var):
        n = a.value.size

        def bwd(g, a=a, n=n):
            _accum(a, np.full_like(a.value, float(g) / n))

        return _node(a.value.mean(), (a,), bwd, "mean")
    return _val(a).mean()


# ---------------------------------------------------------------------------
# jets: forward-mode first/second derivatives with tape-valued components
# ---------------------------------------------------------------------------

class Jet:
    """Value plus tracked first (``d1``) and second (``d2``) derivatives.

    ``d1`` maps an input-dimension index to the directional derivative along
    that coordinate; ``d2`` maps a sorted index pair to the corresponding
    second derivative.  Missing entries mean exactly zero.  Components may be
    plain arrays or tape variables.
    """

    __slots__ = ("val", "d1", "d2")

    def __init__(self, val, d1=None, d2=None):
        self.val = val
        self.d1 = d1 if d1 is not None else {}
        self.d2 = d2 if d2 is not None else {}

    def __repr__(self):
        return f"Jet(d1={sorted(self.d1)}, d2={sorted(self.d2)})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _jet_neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def first(self, i):
        """First derivative along dimension ``i`` (zero if untracked)."""
        got = self.d1.get(i)
        return got if got is not None else np.zeros_like(value_of(self.val))

    def second(self, i, j):
        got = self.d2.get(_pkey(i, j))
        return got if got is not None else np.zeros_like(value_of(self.val))


def _pkey(i, j):
    return (i, j) if i <= j else (j, i)


def _as_jet(x):
    return x if isinstance(x, Jet) else Jet(x)


def _or_zeros(c, ref):
    return c if c is not None else np.zeros_like(ref)


def _nadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _jet_keys(u, v):
    dims = set(u.d1) | set(v.d1)
    pairs = set(u.d2) | set(v.d2)
    return dims, pairs


def _jet_add(u, v):
    dims, pairs = _jet_keys(u, v)
    return Jet(
        add(u.val, v.val),
        {i: _nadd(u.d1.get(i), v.d1.get(i)) for i in dims},
        {k: _nadd(u.d2.get(k), v.d2.get(k)) for k in pairs},
    )


def _jet_neg(u):
    return _jet_unary_linear(u, neg, "neg")


def _jet_unary_linear(u, f, op):
    return Jet(
        f(u.val),
        {i: f(c) for i, c in u.d1.items()},
        {k: f(c) for k, c in u.d2.items()},
    )


_ACTIVE_PAIRS = None  # None -> track every second-derivative pair


class jet_pair_scope:
    """Restrict which second-derivative pairs jets propagate.

    Entering with an empty tuple turns off all second-order work (pure
    first-order forward mode); ``None`` restores the track-everything default.
    """

    def __init__(self, pairs):
        self.pairs = None if pairs is None else frozenset(_pkey(*p) for p in pairs)
        self._saved = None

    def __enter__(self):
        global _ACTIVE_PAIRS
        self._saved = _ACTIVE_PAIRS
        _ACTIVE_PAIRS = self.pairs
        return self

    def __exit__(self, *exc):
        global _ACTIVE_PAIRS
        _ACTIVE_PAIRS = self._saved
        return False


def _pair_on(key):
    return _ACTIVE_PAIRS is None or key in _ACTIVE_PAIRS


def _safe_mul(a, b):
    if a is None or b is None:
        return None
    return mul(a, b)


def _jet_mul(u, v):
    val = mul(u.val, v.val)
    dims = set(u.d1) | set(v.d1)
    d1 = {}
    for i in dims:
        term = _nadd(_safe_mul(u.d1.get(i), v.val), _safe_mul(u.val, v.d1.get(i)))
        if term is not None:
            d1[i] = term
    cand = set(u.d2) | set(v.d2)
    cand.update(_pkey(i, j) for i in u.d1 for j in v.d1)
    d2 = {}
    for key in cand:
        if not _pair_on(key):
            continue
        i, j = key
        term = _nadd(_safe_mul(u.d2.get(key), v.val), _safe_mul(u.val, v.d2.get(key)))
        c1 = _safe_mul(u.d1.get(i), v.d1.get(j))
        if i == j:
            cross = None if c1 is None else _nadd(c1, c1)
        else:
            cross = _nadd(c1, _safe_mul(u.d1.get(j), v.d1.get(i)))
        term = _nadd(term, cross)
        if term is not None:
            d2[key] = term
    return Jet(val, d1, d2)


def _jet_div(u, v):
    q_val = div(u.val, v.val)
    dims = set(u.d1) | set(v.d1)
    d1 = {}
    for i in dims:
        num = u.d1.get(i)
        vi = v.d1.get(i)
        if vi is not None:
            num = _nadd(num, neg(mul(q_val, vi)))
        if num is not None:
            d1[i] = div(num, v.val)
    cand = set(u.d2) | set(v.d2)
    cand.update(_pkey(i, j) for i in d1 for j in v.d1)
    d2 = {}
    for key in cand:
        if not _pair_on(key):
            continue
        i, j = key
        term = u.d2.get(key)
        vij = v.d2.get(key)
        if vij is not None:
            term = _nadd(term, neg(mul(q_val, vij)))
        term = _nadd(term, _neg_or_none(_safe_mul(d1.get(i), v.d1.get(j))))
        term = _nadd(term, _neg_or_none(_safe_mul(d1.get(j), v.d1.get(i))))
        if term is not None:
            d2[key] = div(term, v.val)
    return Jet(q_val, d1, d2)


def _neg_or_none(a):
    return None if a is None else neg(a)


def _jet_unary(u, f_val, f_prime, f_second, op):
    """Chain rule for unary f: d2 = f' u'' + f'' u_i u_j.

    ``f_second`` is a thunk so the second derivative of f is only built when
    some second-order pair is actually tracked.
    """
    d1 = {i: mul(f_prime, c) for i, c in u.d1.items()}
    pairs = set(u.d2)
    pairs.update(_pkey(i, j) for i in u.d1 for j in u.d1)
    pairs = {k for k in pairs if _pair_on(k)}
    d2 = {}
    if pairs:
        fpp = f_second()
        for key in pairs:
            i, j = key
            term = None
            uij = u.d2.get(key)
            if uij is not None:
                term = mul(f_prime, uij)
            cross = _safe_mul(u.d1.get(i), u.d1.get(j))
            if cross is not None:
                term = _nadd(term, mul(fpp, cross))
            if term is not None:
                d2[key] = term
    return Jet(f_val, d1, d2)


# ---------------------------------------------------------------------------
# public surfaces
# ---------------------------------------------------------------------------

def param_gradient(loss_fn, params):
    """Exact reverse-mode gradient of a scalar loss at ``params``.

    ``loss_fn`` receives a single flat Var and must return a scalar node.
    Non-finite intermediates raise :class:`NonFiniteError` naming the
    primitive that produced them.
    """
    global _CHECK_FINITE
    params = np.asarray(params, dtype=np.float64)
    leaf = Var(params)
    prev = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        out = loss_fn(leaf)
    finally:
        _CHECK_FINITE = prev
    if not isinstance(out, Var):
        return np.zeros_like(params)
    if out.value.size != 1:
        raise ShapeError("loss function must return a scalar")
    backward(out)
    return leaf.grad.copy() if leaf.grad is not None else np.zeros_like(params)


def seed_jets(columns, order, pairs=None):
    """Turn per-dimension input columns into seeded jets.

    Returns ``(jets, tracked_pairs)``; evaluate the network inside a
    ``jet_pair_scope(tracked_pairs)`` so only the requested second
    derivatives are propagated.  ``pairs`` defaults to all diagonal pairs
    when ``order == 2``; tracking (i, j) with i != j yields the mixed
    derivative.
    """
    if order not in (1, 2):
        raise UnsupportedOrderError(f"derivative order {order} not supported")
    d = len(columns)
    if order == 2 and pairs is None:
        pairs = [(i, i) for i in range(d)]
    jets = []
    for i, col in enumerate(columns):
        cv = value_of(col)
        jets.append(Jet(col, {i: np.ones_like(cv)}, {}))
    tracked = tuple(_pkey(*p) for p in pairs) if order == 2 else ()
    return jets, tracked


def input_derivatives(net, x, order, pairs=None):
    """Exact input derivatives of a scalar-valued network at point(s) ``x``.

    ``net`` receives one jet per input dimension and must return the output
    jet.  Returns ``(u, first, second)`` where ``first[i]`` is du/dx_i and
    ``second[(i, j)]`` holds the tracked second derivatives.  The returned
    objects are expression values: building a residual from them keeps the
    result differentiable with respect to parameters.
    """
    if order not in (1, 2):
        raise UnsupportedOrderError(f"derivative order {order} not supported")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        cols = [x[i] for i in range(x.shape[0])]
    else:
        cols = [x[:, i] for i in range(x.shape[1])]
    if order == 2 and pairs is None:
        pairs = [(i, i) for i in range(len(cols))]
    jets, tracked = seed_jets(cols, order, pairs)
    with jet_pair_scope(tracked):
        out = net(jets)
    if not isinstance(out, Jet):
        raise ShapeError("network must be evaluated on the provided jets")
    first = {i: out.first(i) for i in range(len(cols))}
    # mixed pairs are stored once and served under whichever order was asked
    second = {tuple(p): out.second(*p) for p in pairs} if order == 2 else {}
    return out.val, first, second
