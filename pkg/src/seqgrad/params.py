"""Named parameter collections and their gradient mirrors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

ARCHS = ("rnn", "lstm", "gru")

# (input weight, recurrent weight, bias) per gate, in evaluation order.
GATES = {
    "rnn": {"h": ("w_in", "w_rec", "b")},
    "lstm": {
        "f": ("w_if", "w_sf", "b_f"),
        "il": ("w_iil", "w_sil", "b_il"),
        "if": ("w_iif", "w_sif", "b_if"),
        "o": ("w_io", "w_so", "b_o"),
    },
    "gru": {
        "z": ("w_zi", "w_zs", "b_z"),
        "r": ("w_ri", "w_rs", "b_r"),
        "c": ("w_ci", "w_si", "b_c"),
    },
}

HEAD = ("w_out", "b_out")


def cell_names(arch: str) -> list[str]:
    return [n for triple in GATES[arch].values() for n in triple]


def ln_names(arch: str) -> list[str]:
    return [f"ln_{kind}_{g}" for g in GATES[arch] for kind in ("g", "b")]


class ParamSet:
    """Architecture-tagged ordered mapping of parameter name -> array.

    Optional entries switch features on by their presence: ``ln_g_*`` /
    ``ln_b_*`` enable layer normalization of gate pre-activations,
    ``w_proj`` / ``b_proj`` a tanh input projection, ``h0`` / ``c0`` a
    trainable initial state, and ``w_out`` / ``b_out`` the output head.
    """

    def __init__(self, arch: str, tensors: dict[str, np.ndarray], output: str = "softmax"):
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        if output not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.arch = arch
        self.output = output
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def hidden_dim(self) -> int:
        return self.tensors[GATES[self.arch][next(iter(GATES[self.arch]))][1]].shape[0]

    @property
    def input_dim(self) -> int:
        """Dimension of the raw input (before any projection)."""
        if "w_proj" in self.tensors:
            return self.tensors["w_proj"].shape[1]
        return self.cell_input_dim

    @property
    def cell_input_dim(self) -> int:
        return self.tensors[GATES[self.arch][next(iter(GATES[self.arch]))][0]].shape[1]

    @property
    def output_dim(self) -> int | None:
        w = self.tensors.get("w_out")
        return None if w is None else w.shape[0]

    @property
    def has_layer_norm(self) -> bool:
        return any(n.startswith("ln_") for n in self.tensors)

    def size(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ParamSet":
        return type(self)(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.output)

    def zeros_like(self) -> "GradSet":
        return GradSet(self.arch, {k: np.zeros_like(v) for k, v in self.tensors.items()}, self.output)

    def add_(self, partial: dict[str, np.ndarray]) -> None:
        """Accumulate a partial gradient dict in place."""
        for k, v in partial.items():
            self.tensors[k] += v

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()]) if self.tensors else np.zeros(0)

    def same_structure(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[n].shape == other[n].shape for n in self.tensors
        )

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite entries in {k}")

    def subset(self, prefix: str) -> "ParamSet":
        """View of the entries under ``prefix`` with the prefix stripped (arrays shared)."""
        sub = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        return type(self)(self.arch, sub, self.output)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self.tensors.items())
        return f"{type(self).__name__}({self.arch}: {shapes})"


class GradSet(ParamSet):
    """Gradient buffers shaped exactly like a ParamSet."""


def layer_prefix(layer: int, n_layers: int) -> str:
    return "" if n_layers == 1 else f"l{layer}."


def split_layers(params: ParamSet, n_layers: int) -> list[ParamSet]:
    if n_layers == 1:
        return [params]
    return [params.subset(layer_prefix(i, n_layers)) for i in range(n_layers)]


def merge_layers(layers: list[ParamSet]) -> ParamSet:
    n = len(layers)
    if n == 1:
        return layers[0]
    out = {}
    for i, p in enumerate(layers):
        for k, v in p.items():
            out[layer_prefix(i, n) + k] = v
    return type(layers[0])(layers[0].arch, out, layers[-1].output)
