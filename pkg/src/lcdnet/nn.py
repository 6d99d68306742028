"""Parameter containers and the basic layers every block is built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .core import ConvSpec, Tensor, ops


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks whether weight decay applies."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.decay = decay


class Module:
    """Tree of named parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> list:
        """Copy arrays into matching parameters and buffers.

        Shape mismatches always raise (naming the tensor). Names absent from
        ``state`` raise only when ``strict``; the list of missing names is
        returned either way.
        """
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: archive {arr.shape}, model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for mod_name, mod in self.named_modules():
            for bname, buf in mod._buffers.items():
                full = f"{mod_name}.{bname}" if mod_name else bname
                if full not in state:
                    missing.append(full)
                    continue
                arr = np.asarray(state[full])
                if arr.shape != buf.shape:
                    raise ValueError(f"shape mismatch for {full}: archive {arr.shape}, model {buf.shape}")
                buf[...] = arr
        if strict and missing:
            raise KeyError(f"missing tensors: {', '.join(missing[:5])}"
                           + (" ..." if len(missing) > 5 else ""))
        return missing

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers to ``dtype`` in place."""
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                new = b.astype(dtype)
                m._buffers[name] = new
                object.__setattr__(m, name, new)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-uniform init for ReLU-family nets: Var[w] = 2 / fan_in."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels // spec.groups * kh * kw
        self.weight = Parameter(kaiming_uniform(spec.weight_shape, fan_in, rng))
        if spec.has_bias:
            self.bias = Parameter(np.zeros(spec.out_channels, dtype=np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)

    def profile(self, rep, name: str, shape: tuple, streams: int = 1, applications: int = 1) -> tuple:
        n, c, h, w = shape
        ho, wo = self.spec.output_hw(h, w)
        out = (n, self.spec.out_channels, ho, wo)
        macs = self.weight.size * ho * wo * streams * applications
        rep.add(name, (n * streams,) + out[1:], self.num_parameters(), macs)
        return out


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.weight = Parameter(np.ones(channels, dtype=np.float32), decay=False)
        self.bias = Parameter(np.zeros(channels, dtype=np.float32), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor, act: Optional[str] = None) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               training=self.training and not self.frozen,
                               momentum=self.momentum, eps=self.eps, act=act)

    def profile(self, rep, name: str, shape: tuple, streams: int = 1) -> tuple:
        n, c, h, w = shape
        rep.add(name, (n * streams, c, h, w), self.num_parameters(), c * h * w * streams,
                buffers=2 * c)
        return shape


class ConvBN(Module):
    """Convolution (no bias) -> batch norm -> optional activation."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, act: Optional[str] = "relu6"):
        super().__init__()
        if act not in (None, "relu", "relu6"):
            raise ValueError(f"unknown activation {act!r}")
        if spec.has_bias:
            raise ValueError("ConvBN convolutions carry no bias")
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x), act=self.act)

    def profile(self, rep, name: str, shape: tuple, streams: int = 1) -> tuple:
        shape = self.conv.profile(rep, f"{name}.conv", shape, streams)
        shape = self.bn.profile(rep, f"{name}.bn", shape, streams)
        if self.act is not None:
            rep.elementwise(f"{name}.{self.act}", shape, streams)
        return shape
