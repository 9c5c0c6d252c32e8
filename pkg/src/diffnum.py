"""
Noyau numérique différentiable minimal.

Ce module fournit tout ce dont les composants appris (acteur, critiques,
membres de l'ensemble de dynamique) ont besoin :
- un noeud `Tensor` pour la différentiation en mode inverse sur des tableaux numpy
- des perceptrons multicouches tanh (`MlpParams`, `init_mlp`, `forward`)
- le calcul de gradient sur des arbres de paramètres (`gradient`, `value_and_gradient`)
- l'optimiseur Adam en style fonctionnel (`adam_init`, `adam_step`)
- un format JSON versionné pour les poids

Tous les calculs sont faits en float64.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import NumericError, ShapeError


MLP_FORMAT = "diffnum-mlp"
MLP_FORMAT_VERSION = 1
ACTIVATIONS = ("tanh",)
INIT_SCHEMES = ("uniform_fan_in", "orthogonal")


# -------------------------------------------------------------------------
# Noeud du graphe de calcul
# -------------------------------------------------------------------------
def _as_array(value: Any) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # somme sur les axes ajoutés ou étendus par le broadcasting numpy
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """
    Valeur numpy enregistrée dans un graphe de calcul.

    Chaque noeud garde ses parents et une fonction qui, à partir du gradient
    amont, renvoie le gradient de chaque parent. `backward()` parcourt le
    graphe en ordre topologique inverse et accumule `grad` sur les feuilles
    créées avec `requires_grad=True`.
    """

    # numpy renvoie NotImplemented sur ndarray <op> Tensor -> opérateur réfléchi du Tensor
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]] = None,
        op: str = "",
    ) -> None:
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = tuple(parents)
        self._backward = backward
        self._op = op

    # ------------------------------
    # Métadonnées
    # ------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    @staticmethod
    def lift(value: Any) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _node(data: np.ndarray, parents: Tuple["Tensor", ...], backward, op: str) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, parents=parents, backward=backward, op=op)
        return Tensor(data)

    # ------------------------------
    # Opérateurs arithmétiques
    # ------------------------------
    def __add__(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        return Tensor._node(
            self.data + o.data,
            (self, o),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)),
            "+",
        )

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        return Tensor._node(
            self.data - o.data,
            (self, o),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)),
            "-",
        )

    def __rsub__(self, other: Any) -> "Tensor":
        return Tensor.lift(other) - self

    def __mul__(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        a, b = self.data, o.data
        return Tensor._node(
            a * b,
            (self, o),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, o.shape)),
            "*",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        a, b = self.data, o.data
        return Tensor._node(
            a / b,
            (self, o),
            lambda g: (_unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), o.shape)),
            "/",
        )

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Tensor.lift(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("seuls les exposants scalaires sont supportés")
        p = float(exponent)
        a = self.data
        return Tensor._node(a ** p, (self,), lambda g: (g * p * a ** (p - 1.0),), f"**{p:g}")

    def __matmul__(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        a, b = self.data, o.data
        if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"produit matriciel impossible: {a.shape} @ {b.shape}")

        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            if a.ndim == 1:
                return b @ g, np.outer(a, g)
            return g @ b.T, a.T @ g

        return Tensor._node(a @ b, (self, o), backward, "@")

    def __rmatmul__(self, other: Any) -> "Tensor":
        return Tensor.lift(other) @ self

    # ------------------------------
    # Fonctions élémentaires
    # ------------------------------
    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return Tensor._node(t, (self,), lambda g: (g * (1.0 - t * t),), "tanh")

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._node(e, (self,), lambda g: (g * e,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._node(np.log(a), (self,), lambda g: (g / a,), "log")

    def square(self) -> "Tensor":
        return self * self

    def clip(self, low: float, high: float) -> "Tensor":
        a = self.data
        inside = (a >= low) & (a <= high)
        return Tensor._node(np.clip(a, low, high), (self,), lambda g: (g * inside,), "clip")

    def minimum(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        # à égalité, le gradient passe par le premier argument
        pick_self = self.data <= o.data
        return Tensor._node(
            np.where(pick_self, self.data, o.data),
            (self, o),
            lambda g: (_unbroadcast(g * pick_self, self.shape), _unbroadcast(g * ~pick_self, o.shape)),
            "min",
        )

    def maximum(self, other: Any) -> "Tensor":
        o = Tensor.lift(other)
        pick_self = self.data >= o.data
        return Tensor._node(
            np.where(pick_self, self.data, o.data),
            (self, o),
            lambda g: (_unbroadcast(g * pick_self, self.shape), _unbroadcast(g * ~pick_self, o.shape)),
            "max",
        )

    # ------------------------------
    # Réductions et remodelage
    # ------------------------------
    def sum(self, axis: Optional[int | Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis: Optional[int | Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def __getitem__(self, index: Any) -> "Tensor":
        original = self.shape

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            full = np.zeros(original, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._node(self.data[index], (self,), backward, "getitem")

    # ------------------------------
    # Rétropropagation
    # ------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propage le gradient de ce noeud vers toutes les feuilles différentiables.

        Args:
            grad: Gradient amont ; optionnel pour un noeud scalaire (vaut 1)
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() sans gradient initial exige un scalaire, reçu {self.shape}")
            grad = np.ones_like(self.data)
        pending = {id(self): _as_array(grad)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# -------------------------------------------------------------------------
# Fonctions utilisables indifféremment sur ndarray et Tensor
# -------------------------------------------------------------------------
def _involves_tensor(*values: Any) -> bool:
    return any(isinstance(v, Tensor) for v in values)


def tanh(x: Any) -> Any:
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def exp(x: Any) -> Any:
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x: Any) -> Any:
    return x.log() if isinstance(x, Tensor) else np.log(x)


def square(x: Any) -> Any:
    return x.square() if isinstance(x, Tensor) else np.square(x)


def clip(x: Any, low: float, high: float) -> Any:
    return x.clip(low, high) if isinstance(x, Tensor) else np.clip(x, low, high)


def minimum(a: Any, b: Any) -> Any:
    if _involves_tensor(a, b):
        return Tensor.lift(a).minimum(b)
    return np.minimum(a, b)


def maximum(a: Any, b: Any) -> Any:
    if _involves_tensor(a, b):
        return Tensor.lift(a).maximum(b)
    return np.maximum(a, b)


def reduce_sum(x: Any, axis: Optional[int] = None) -> Any:
    return x.sum(axis=axis) if isinstance(x, Tensor) else np.sum(x, axis=axis)


def reduce_mean(x: Any, axis: Optional[int] = None) -> Any:
    return x.mean(axis=axis) if isinstance(x, Tensor) else np.mean(x, axis=axis)


def value_of(x: Any) -> np.ndarray:
    """Valeur numérique brute d'un Tensor ou d'un tableau."""
    return x.data if isinstance(x, Tensor) else _as_array(x)


# -------------------------------------------------------------------------
# Arbres de paramètres
# -------------------------------------------------------------------------
def _flatten(node: Any, leaves: List[Any]) -> Callable[[Iterator[Any]], Any]:
    if isinstance(node, (np.ndarray, Tensor)):
        leaves.append(node)
        return lambda it: next(it)
    if dataclasses.is_dataclass(node) and not isinstance(node, type):
        builders = [
            (f.name, _flatten(getattr(node, f.name), leaves))
            for f in dataclasses.fields(node)
            if f.init
        ]
        return lambda it: dataclasses.replace(node, **{name: build(it) for name, build in builders})
    if isinstance(node, Mapping):
        builders = [(key, _flatten(value, leaves)) for key, value in node.items()]
        return lambda it: {key: build(it) for key, build in builders}
    if isinstance(node, (list, tuple)):
        builders = [_flatten(value, leaves) for value in node]
        kind = type(node)
        return lambda it: kind([build(it) for build in builders])
    # entiers, chaînes, None... : partie statique de l'arbre
    return lambda it: node


def tree_flatten(tree: Any) -> Tuple[List[Any], Callable[[Iterable[Any]], Any]]:
    """
    Aplati un arbre de paramètres (dataclasses, mappings, séquences de tableaux).

    Returns:
        Tuple (feuilles, reconstruction) où reconstruction(nouvelles_feuilles)
        rend un arbre de même structure.
    """
    leaves: List[Any] = []
    rebuild = _flatten(tree, leaves)
    return leaves, lambda new_leaves: rebuild(iter(new_leaves))


def tree_map(fn: Callable[..., Any], tree: Any, *others: Any) -> Any:
    leaves, unflatten = tree_flatten(tree)
    other_leaves = [tree_flatten(o)[0] for o in others]
    for ol in other_leaves:
        if len(ol) != len(leaves):
            raise ShapeError(f"arbres incompatibles: {len(leaves)} vs {len(ol)} feuilles")
    return unflatten([fn(leaf, *rest) for leaf, *rest in zip(leaves, *other_leaves)])


# -------------------------------------------------------------------------
# Perceptron multicouche
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Paramètres d'un perceptron multicouche.

    Les poids de la couche k ont la forme (layer_sizes[k], layer_sizes[k+1]),
    l'activation tanh est appliquée sur toutes les couches cachées, la couche
    de sortie est linéaire.
    """

    layer_sizes: Tuple[int, ...]
    weights: Tuple[Any, ...]
    biases: Tuple[Any, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"layer_sizes invalide: {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation inconnue: {self.activation}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))

        n_layers = len(sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(f"{n_layers} couches attendues, reçu {len(self.weights)} poids / {len(self.biases)} biais")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tuple(w.shape) != (sizes[k], sizes[k + 1]):
                raise ShapeError(f"couche {k}: poids {tuple(w.shape)} au lieu de {(sizes[k], sizes[k + 1])}")
            if tuple(b.shape) != (sizes[k + 1],):
                raise ShapeError(f"couche {k}: biais {tuple(b.shape)} au lieu de {(sizes[k + 1],)}")
            for arr in (w, b):
                if isinstance(arr, np.ndarray) and not np.all(np.isfinite(arr)):
                    raise NumericError(f"paramètre non fini dans la couche {k}", arr[~np.isfinite(arr)][:3])

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    scheme: str = "uniform_fan_in",
    output_scale: float = 1.0,
) -> MlpParams:
    """
    Initialise un MLP de façon reproductible.

    Args:
        layer_sizes: Tailles des couches, entrée et sortie comprises
        rng: Générateur numpy (seule source d'aléa)
        scheme: "uniform_fan_in" (U(-1/sqrt(fan_in), 1/sqrt(fan_in))) ou "orthogonal"
        output_scale: Facteur appliqué aux poids et biais de la dernière couche

    Returns:
        MlpParams initialisés
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"schéma d'initialisation inconnu: {scheme}")
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if scheme == "uniform_fan_in":
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        else:
            a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
            q, r = np.linalg.qr(a)
            q = q * np.sign(np.diag(r))
            w = q if fan_in >= fan_out else q.T
            w = w[:fan_in, :fan_out].copy()
            b = np.zeros(fan_out)
        if k == len(sizes) - 2:
            w = w * output_scale
            b = b * output_scale
        weights.append(w)
        biases.append(b)
    return MlpParams(layer_sizes=tuple(sizes), weights=tuple(weights), biases=tuple(biases))


def forward(params: MlpParams, inputs: Any) -> Any:
    """
    Passe avant du MLP, pour un vecteur (in,) ou un lot (N, in).

    Pure : aucun état n'est modifié. Renvoie un ndarray si paramètres et
    entrées sont numériques, un Tensor dès qu'un des deux en est un.
    """
    x = inputs if isinstance(inputs, Tensor) else _as_array(inputs)
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(f"entrée de forme {x.shape}, dimension {params.input_dim} attendue")
    h = x
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = tanh(h)
    return h


# -------------------------------------------------------------------------
# Gradients
# -------------------------------------------------------------------------
def value_and_gradient(loss: Callable[[Any], Any], params: Any) -> Tuple[float, Any]:
    """
    Évalue une perte scalaire et son gradient par rapport à un arbre de paramètres.

    Args:
        loss: Fonction recevant l'arbre de paramètres (feuilles en Tensor)
        params: Arbre de paramètres (MlpParams, dataclass, dict, séquence de tableaux)

    Returns:
        Tuple (valeur, gradient) ; le gradient a la structure de params

    Raises:
        NumericError: Si la perte n'est pas finie
    """
    leaves, unflatten = tree_flatten(params)
    variables = [Tensor(value_of(leaf), requires_grad=True) for leaf in leaves]
    out = loss(unflatten(variables))
    value = value_of(out)
    if value.size != 1:
        raise ShapeError(f"la perte doit être scalaire, forme reçue {value.shape}")
    scalar = float(value.reshape(()))
    if not math.isfinite(scalar):
        raise NumericError("perte non finie", scalar)
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    grads = [v.grad if v.grad is not None else np.zeros_like(v.data) for v in variables]
    return scalar, unflatten(grads)


def gradient(loss: Callable[[Any], Any], params: Any) -> Any:
    """Gradient de `loss` en `params`, même structure que `params`."""
    return value_and_gradient(loss, params)[1]


def finite_difference_gradient(loss: Callable[[Any], Any], params: Any, step: float = 1e-5) -> Any:
    """Gradient par différences centrées (oracle de vérification)."""
    leaves, unflatten = tree_flatten(params)
    base = [value_of(leaf).copy() for leaf in leaves]
    grads = [np.zeros_like(b) for b in base]
    for i, arr in enumerate(base):
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + step
            plus = float(value_of(loss(unflatten(base))))
            arr[idx] = original - step
            minus = float(value_of(loss(unflatten(base))))
            arr[idx] = original
            grads[i][idx] = (plus - minus) / (2.0 * step)
    return unflatten(grads)


# -------------------------------------------------------------------------
# Optimiseur Adam
# -------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Accumulateurs d'Adam, dans l'ordre des feuilles de l'arbre de paramètres."""

    first_moment: Tuple[np.ndarray, ...]
    second_moment: Tuple[np.ndarray, ...]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate doit être > 0, reçu {self.learning_rate}")
        if self.step < 0:
            raise ValueError(f"step doit être >= 0, reçu {self.step}")
        if len(self.first_moment) != len(self.second_moment):
            raise ShapeError("moments de tailles différentes")
        for m, v in zip(self.first_moment, self.second_moment):
            if m.shape != v.shape:
                raise ShapeError(f"moments de formes différentes: {m.shape} vs {v.shape}")


def adam_init(params: Any, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    leaves, _ = tree_flatten(params)
    zeros = tuple(np.zeros_like(value_of(leaf)) for leaf in leaves)
    return OptimizerState(
        first_moment=zeros,
        second_moment=tuple(z.copy() for z in zeros),
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: Any, grads: Any, state: OptimizerState) -> Tuple[Any, OptimizerState]:
    """
    Un pas d'Adam avec correction de biais.

    Returns:
        Tuple (nouveaux paramètres, nouvel état) ; les entrées ne sont pas modifiées

    Raises:
        ShapeError: Si paramètres, gradients et accumulateurs ne concordent pas
    """
    p_leaves, unflatten = tree_flatten(params)
    g_leaves, _ = tree_flatten(grads)
    if not (len(p_leaves) == len(g_leaves) == len(state.first_moment)):
        raise ShapeError(
            f"{len(p_leaves)} paramètres, {len(g_leaves)} gradients, {len(state.first_moment)} accumulateurs"
        )
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_leaves, g_leaves, state.first_moment, state.second_moment):
        p, g = value_of(p), value_of(g)
        if not (p.shape == g.shape == m.shape):
            raise ShapeError(f"forme paramètre {p.shape}, gradient {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = dataclasses.replace(state, first_moment=tuple(new_m), second_moment=tuple(new_v), step=t)
    return unflatten(new_params), new_state


# -------------------------------------------------------------------------
# Sérialisation
# -------------------------------------------------------------------------
def mlp_to_dict(params: MlpParams) -> dict:
    """
    Disposition JSON `diffnum-mlp` v1 : en-tête (tailles de couches,
    activation) puis, par couche, les poids aplatis en ordre ligne-majeur
    (forme (in, out)) et les biais.
    """
    return {
        "format": MLP_FORMAT,
        "version": MLP_FORMAT_VERSION,
        "layer_sizes": list(params.layer_sizes),
        "activation": params.activation,
        "weights": [np.asarray(w).ravel(order="C").tolist() for w in params.weights],
        "biases": [np.asarray(b).tolist() for b in params.biases],
    }


def mlp_from_dict(payload: Mapping[str, Any]) -> MlpParams:
    if payload.get("format") != MLP_FORMAT or payload.get("version") != MLP_FORMAT_VERSION:
        raise ValueError(f"format de poids non supporté: {payload.get('format')} v{payload.get('version')}")
    sizes = [int(s) for s in payload["layer_sizes"]]
    weights = tuple(
        np.asarray(flat, dtype=np.float64).reshape(sizes[k], sizes[k + 1])
        for k, flat in enumerate(payload["weights"])
    )
    biases = tuple(np.asarray(b, dtype=np.float64) for b in payload["biases"])
    return MlpParams(layer_sizes=tuple(sizes), weights=weights, biases=biases, activation=payload["activation"])


def optimizer_to_dict(state: OptimizerState) -> dict:
    return {
        "step": state.step,
        "learning_rate": state.learning_rate,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "shapes": [list(m.shape) for m in state.first_moment],
        "first_moment": [m.ravel().tolist() for m in state.first_moment],
        "second_moment": [v.ravel().tolist() for v in state.second_moment],
    }


def optimizer_from_dict(payload: Mapping[str, Any]) -> OptimizerState:
    shapes = [tuple(s) for s in payload["shapes"]]
    return OptimizerState(
        first_moment=tuple(np.asarray(m, dtype=np.float64).reshape(s) for m, s in zip(payload["first_moment"], shapes)),
        second_moment=tuple(np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(payload["second_moment"], shapes)),
        step=int(payload["step"]),
        learning_rate=float(payload["learning_rate"]),
        beta1=float(payload["beta1"]),
        beta2=float(payload["beta2"]),
        eps=float(payload["eps"]),
    )
