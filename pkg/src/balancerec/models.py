"""Networks used by the training lab.

All parameters live in a ModelBundle as plain float64 arrays; each
training step mounts them onto a fresh GradGraph with a chosen set of
trainable groups. Weight matrices are stored (in_dim, out_dim) so batches
multiply on the left.

Components:
  - user/item embedding tables (group "emb")
  - phi: linear map from [user_embedding; confounder] to the balanced
    user representation (group "phi")
  - f: the rating head, either GMF (elementwise product, then a weighted
    sum and sigmoid) or an MLP with two ReLU hidden layers (group "f")
  - D: item-distribution discriminator, softmax over items (group "D")
  - c: confounder inference net on [user; item] (group "c")
  - s: exposure likelihood net on [user; item; confounder] (group "s")
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T

GEN_GROUPS = frozenset({"emb", "phi", "f", "c", "s"})
DISC_GROUPS = frozenset({"D"})


@dataclass
class ModelDims:
    num_users: int
    num_items: int
    embed_dim: int = 32
    conf_dim: int = 8
    rep_dim: int | None = None
    mlp_hidden: tuple = (64, 32)
    d_hidden: int = 64
    c_hidden: tuple = (64, 32)
    s_hidden: tuple = (64, 32)

    def __post_init__(self):
        if self.rep_dim is None:
            self.rep_dim = self.embed_dim
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.c_hidden = tuple(self.c_hidden)
        self.s_hidden = tuple(self.s_hidden)


def _param_shapes(kind: str, d: ModelDims) -> list[tuple[str, tuple]]:
    e, r, c = d.embed_dim, d.rep_dim, d.conf_dim
    shapes = [
        ("emb.user", (d.num_users, e)),
        ("emb.item", (d.num_items, e)),
        ("phi.W", (e + c, r)),
    ]
    if kind == "gmf":
        if r != e:
            raise ValueError("GMF needs rep_dim == embed_dim for the elementwise product")
        shapes.append(("f.w", (e, 1)))
    elif kind == "mlp":
        h1, h2 = d.mlp_hidden
        shapes += [
            ("f.W1", (r + e, h1)), ("f.b1", (h1,)),
            ("f.W2", (h1, h2)), ("f.b2", (h2,)),
            ("f.W3", (h2, 1)), ("f.b3", (1,)),
        ]
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    c1, c2 = d.c_hidden
    s1, s2 = d.s_hidden
    shapes += [
        ("D.W2", (r, d.d_hidden)), ("D.W1", (d.d_hidden, d.num_items)),
        ("c.V3", (2 * e, c1)), ("c.V2", (c1, c2)), ("c.V1", (c2, c)),
        ("s.Q3", (2 * e + c, s1)), ("s.Q2", (s1, s2)), ("s.Q1", (s2, 1)),
    ]
    return shapes


@dataclass
class ModelBundle:
    kind: str
    dims: ModelDims
    params: dict = field(default_factory=dict)

    def group(self, name: str) -> str:
        return name.split(".", 1)[0]

    def group_names(self, group: str) -> list[str]:
        return [n for n in self.params if self.group(n) == group]

    def mount(self, graph: T.GradGraph, trainable=GEN_GROUPS) -> dict:
        """Create one graph leaf per parameter array.

        Arrays are copied onto the graph; read gradients out by node and
        apply updates back to `self.params`.
        """
        nodes = {}
        for name, arr in self.params.items():
            if self.group(name) in trainable:
                nodes[name] = graph.parameter(arr, name=name)
            else:
                nodes[name] = graph.constant(arr, name=name)
        return nodes

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.kind, self.dims,
                           {k: v.copy() for k, v in self.params.items()})


def init_bundle(kind: str, dims: ModelDims, seed: int, init_std: float = 0.05) -> ModelBundle:
    """Gaussian(0, init_std) initialization, one seeded stream, fixed order.

    The default scale balances two failure modes of the elementwise score
    product: much smaller and training stalls near the all-zero point
    where its gradients vanish, much larger and the init noise entrenches
    seed-dependent minima that rank poorly out of sample.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(kind, dims):
        params[name] = rng.normal(0.0, init_std, size=shape)
    return ModelBundle(kind, dims, params)


# -- forward builders -------------------------------------------------------


def user_repr(nodes, user_ids) -> T.Node:
    return T.embed_lookup(nodes["emb.user"], user_ids)


def item_repr(nodes, item_ids) -> T.Node:
    return T.embed_lookup(nodes["emb.item"], item_ids)


def zero_confounder(graph, batch_size: int, conf_dim: int) -> T.Node:
    return graph.constant(np.zeros((batch_size, conf_dim)), name="z0")


def phi_repr(nodes, u_rep: T.Node, z: T.Node) -> T.Node:
    """Balanced user representation: a linear map on [user; confounder]."""
    return T.matmul(T.concat(u_rep, z), nodes["phi.W"])


def predict(bundle: ModelBundle, nodes, phi_u: T.Node, i_rep: T.Node) -> T.Node:
    """Rating prediction in (0, 1), column vector over the batch."""
    if bundle.kind == "gmf":
        return T.sigmoid(T.matmul(T.elementwise_mul(phi_u, i_rep), nodes["f.w"]))
    h = T.concat(phi_u, i_rep)
    h = T.relu(T.add(T.matmul(h, nodes["f.W1"]), nodes["f.b1"]))
    h = T.relu(T.add(T.matmul(h, nodes["f.W2"]), nodes["f.b2"]))
    return T.sigmoid(T.add(T.matmul(h, nodes["f.W3"]), nodes["f.b3"]))


def discriminate(nodes, phi_u: T.Node) -> T.Node:
    """Item assignment distribution per user row: softmax over all items."""
    h = T.relu(T.matmul(phi_u, nodes["D.W2"]))
    return T.softmax(T.matmul(h, nodes["D.W1"]))


def infer_confounder(nodes, u_rep: T.Node, i_rep: T.Node) -> T.Node:
    h = T.relu(T.matmul(T.concat(u_rep, i_rep), nodes["c.V3"]))
    h = T.relu(T.matmul(h, nodes["c.V2"]))
    return T.matmul(h, nodes["c.V1"])


def exposure_prob(nodes, u_rep: T.Node, i_rep: T.Node, z: T.Node) -> T.Node:
    """Likelihood of the observed exposure for each (user, item, z) row."""
    h = T.relu(T.matmul(T.concat(u_rep, i_rep, z), nodes["s.Q3"]))
    h = T.relu(T.matmul(h, nodes["s.Q2"]))
    return T.sigmoid(T.matmul(h, nodes["s.Q1"]))


def score_pairs(graph, bundle: ModelBundle, nodes, user_ids, item_ids,
                use_confounder: bool):
    """Full forward pass for a batch of (user, item) pairs.

    Returns (prediction node, phi node, z node). With the confounder
    disabled z is a zero constant, so phi's confounder columns contribute
    nothing and the model reduces to the plain balanced architecture.
    """
    user_ids = np.asarray(user_ids, dtype=np.int64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    u = user_repr(nodes, user_ids)
    i = item_repr(nodes, item_ids)
    if use_confounder:
        z = infer_confounder(nodes, u, i)
    else:
        z = zero_confounder(graph, len(user_ids), bundle.dims.conf_dim)
    phi_u = phi_repr(nodes, u, z)
    return predict(bundle, nodes, phi_u, i), phi_u, z


def score_matrix(bundle: ModelBundle, user_ids, item_ids, use_confounder: bool) -> np.ndarray:
    """Prediction scores for aligned id arrays, outside any training step."""
    g = T.GradGraph()
    nodes = bundle.mount(g, trainable=frozenset())
    pred, _, _ = score_pairs(g, bundle, nodes, user_ids, item_ids, use_confounder)
    return pred.value[:, 0]


def phi_matrix(bundle: ModelBundle, user_ids, item_ids, use_confounder: bool) -> np.ndarray:
    """Balanced representations for aligned id arrays, no gradients kept."""
    g = T.GradGraph()
    nodes = bundle.mount(g, trainable=frozenset())
    _, phi, _ = score_pairs(g, bundle, nodes, user_ids, item_ids, use_confounder)
    return phi.value


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """JSON checkpoint; float64 values survive the round trip bit-exactly."""
    blob = {
        "kind": bundle.kind,
        "dims": asdict(bundle.dims),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in bundle.params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> ModelBundle:
    with open(path) as fh:
        blob = json.load(fh)
    dims_raw = dict(blob["dims"])
    for key in ("mlp_hidden", "c_hidden", "s_hidden"):
        dims_raw[key] = tuple(dims_raw[key])
    dims = ModelDims(**dims_raw)
    params = {
        name: np.array(p["data"], dtype=np.float64).reshape(p["shape"])
        for name, p in blob["params"].items()
    }
    return ModelBundle(blob["kind"], dims, params)
