"""Declarative network builder and parameter/FLOP auditing.

A network is a list of layer rows (conv / alss / sppf / upsample / concat
/ msca / segment) with explicit wiring, mirrored one-to-one by the audit
table. Each row may declare an expected parameter count and GFLOPs; the
audit reports built-vs-expected per layer. FLOPs are reported as
2 x multiply-accumulates of the convolution-like modules.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import yaml

from ..errors import ConfigurationError
from .blocks import ALSSBlock, ALSSConfig, ConvBNAct, MSCA, MSCAConfig, SPPF, module_params
from .head import SegmentHead, SegmentHeadConfig, SegmentOutputs

LAYER_KINDS = ("input", "conv", "alss", "sppf", "upsample", "concat", "msca", "segment")


@dataclass(frozen=True)
class LayerSpec:
    """One architecture row: wiring, kind-specific arguments, and the
    expected audit values."""

    index: int
    kind: str
    sources: tuple[int, ...] = ()
    args: dict = field(default_factory=dict)
    expected_params: int | None = None
    expected_gflops: float | None = None
    output_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(
                f"layer {self.index}: unknown kind {self.kind!r}"
            )


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative architecture: layer rows plus expected audit totals."""

    name: str
    layers: tuple[LayerSpec, ...]
    input_channels: int = 3
    input_size: tuple[int, int] = (640, 640)
    expected_total_params: int | None = None
    expected_fused_params: int | None = None
    expected_total_gflops: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = []
        for row in d["layers"]:
            row = dict(row)
            index = int(row.pop("index"))
            kind = row.pop("kind")
            sources = row.pop("from", [])
            if isinstance(sources, int):
                sources = [sources]
            expected_params = row.pop("expected_params", None)
            expected_gflops = row.pop("expected_gflops", None)
            output_shape = row.pop("output_shape", None)
            layers.append(
                LayerSpec(
                    index=index,
                    kind=kind,
                    sources=tuple(int(s) for s in sources),
                    args=row,
                    expected_params=None if expected_params is None else int(expected_params),
                    expected_gflops=None if expected_gflops is None else float(expected_gflops),
                    output_shape=None if output_shape is None else tuple(int(v) for v in output_shape),
                )
            )
        return cls(
            name=d.get("name", "network"),
            layers=tuple(layers),
            input_channels=int(d.get("input_channels", 3)),
            input_size=tuple(d.get("input_size", (640, 640))),
            expected_total_params=d.get("expected_total_params"),
            expected_fused_params=d.get("expected_fused_params"),
            expected_total_gflops=d.get("expected_total_gflops"),
        )

    @classmethod
    def from_yaml(cls, path: str | Path) -> "NetworkConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


def default_network_config() -> NetworkConfig:
    """The packaged reference architecture (640x640 input, 25 rows)."""
    ref = importlib.resources.files("segloop.configs") / "alss_seg_640.yaml"
    return NetworkConfig.from_dict(yaml.safe_load(ref.read_text(encoding="utf-8")))


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def _infer_shapes(cfg: NetworkConfig) -> dict[int, tuple[int, int, int]]:
    """Chain output shapes through the layer graph, validating declared
    shapes; raises ConfigurationError naming the offending layer."""
    shapes: dict[int, tuple[int, int, int]] = {}
    for spec in cfg.layers:
        if spec.kind == "input":
            shape = (cfg.input_channels, cfg.input_size[0], cfg.input_size[1])
        else:
            sources = spec.sources
            if not sources:
                raise ConfigurationError(f"layer {spec.index}: missing 'from' wiring")
            for s in sources:
                if s not in shapes:
                    raise ConfigurationError(
                        f"layer {spec.index}: source layer {s} not yet defined"
                    )
            c, h, w = shapes[sources[0]]
            if spec.kind == "conv":
                kernel = int(spec.args.get("kernel", 3))
                stride = int(spec.args.get("stride", 1))
                shape = (
                    int(spec.args["out_channels"]),
                    _conv_out(h, kernel, stride),
                    _conv_out(w, kernel, stride),
                )
            elif spec.kind == "alss":
                stride = int(spec.args.get("stride", 1))
                shape = (
                    int(spec.args["out_channels"]),
                    _conv_out(h, 3, stride),
                    _conv_out(w, 3, stride),
                )
            elif spec.kind == "sppf":
                shape = (int(spec.args.get("out_channels", c)), h, w)
            elif spec.kind == "upsample":
                scale = int(spec.args.get("scale", 2))
                shape = (c, h * scale, w * scale)
            elif spec.kind == "concat":
                total = 0
                for s in sources:
                    sc, sh, sw = shapes[s]
                    if (sh, sw) != (h, w):
                        raise ConfigurationError(
                            f"layer {spec.index} (concat): source {s} is "
                            f"{sh}x{sw}, expected {h}x{w}"
                        )
                    total += sc
                shape = (total, h, w)
            elif spec.kind == "msca":
                shape = (c, h, w)
            elif spec.kind == "segment":
                if len(sources) != 3:
                    raise ConfigurationError(
                        f"layer {spec.index} (segment): needs 3 sources, got "
                        f"{len(sources)}"
                    )
                shape = shapes[sources[0]]  # terminal; placeholder
            else:  # pragma: no cover
                raise ConfigurationError(f"layer {spec.index}: unhandled kind")
        if spec.output_shape is not None and spec.kind != "segment":
            if tuple(spec.output_shape) != shape:
                raise ConfigurationError(
                    f"layer {spec.index} ({spec.kind}): declared output "
                    f"{spec.output_shape}, computed {shape}"
                )
        shapes[spec.index] = shape
    return shapes


def _build_layer(spec: LayerSpec, in_shapes: list[tuple[int, int, int]]) -> nn.Module:
    c = in_shapes[0][0]
    if spec.kind == "input":
        return nn.Identity()
    if spec.kind == "conv":
        return ConvBNAct(
            c,
            int(spec.args["out_channels"]),
            kernel=int(spec.args.get("kernel", 3)),
            stride=int(spec.args.get("stride", 1)),
        )
    if spec.kind == "alss":
        return ALSSBlock(
            ALSSConfig(
                in_channels=c,
                out_channels=int(spec.args["out_channels"]),
                split_fraction=float(spec.args.get("split_fraction", 0.25)),
                stride=int(spec.args.get("stride", 1)),
                bottleneck_ratio=float(spec.args.get("bottleneck_ratio", 0.5)),
                shuffle_groups=int(spec.args.get("shuffle_groups", 2)),
                dw_main=bool(spec.args.get("dw_main", False)),
            )
        )
    if spec.kind == "sppf":
        return SPPF(c, int(spec.args.get("out_channels", c)))
    if spec.kind == "upsample":
        return nn.Upsample(scale_factor=int(spec.args.get("scale", 2)), mode="nearest")
    if spec.kind == "concat":
        return nn.Identity()
    if spec.kind == "msca":
        return MSCA(
            MSCAConfig(
                channels=c,
                alpha=float(spec.args.get("compression", 1.0 / 32.0)),
                use_activation_after_dw=bool(
                    spec.args.get("use_activation_after_dw", False)
                ),
            )
        )
    if spec.kind == "segment":
        return SegmentHead(
            SegmentHeadConfig(
                in_channels=tuple(s[0] for s in in_shapes),
                strides=tuple(int(v) for v in spec.args.get("strides", (8, 16, 32))),
                num_classes=int(spec.args.get("num_classes", 1)),
                reg_max=int(spec.args.get("reg_max", 24)),
                num_prototypes=int(spec.args.get("num_prototypes", 32)),
            )
        )
    raise ConfigurationError(f"layer {spec.index}: unhandled kind {spec.kind!r}")


class SegNetwork(nn.Module):
    """Graph-wired stack of layer rows ending in the segment head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.shapes = _infer_shapes(cfg)
        self.specs = cfg.layers
        modules = {}
        for spec in cfg.layers:
            in_shapes = [self.shapes[s] for s in spec.sources] or [
                (cfg.input_channels, *cfg.input_size)
            ]
            modules[str(spec.index)] = _build_layer(spec, in_shapes)
        self.layers = nn.ModuleDict(modules)

    def forward(self, x: torch.Tensor) -> SegmentOutputs | torch.Tensor:
        outputs: dict[int, torch.Tensor] = {}
        result: SegmentOutputs | torch.Tensor = x
        for spec in self.specs:
            module = self.layers[str(spec.index)]
            if spec.kind == "input":
                value = x
            elif spec.kind == "concat":
                value = torch.cat([outputs[s] for s in spec.sources], dim=1)
            elif spec.kind == "segment":
                value = module([outputs[s] for s in spec.sources])
            else:
                value = module(outputs[spec.sources[0]])
            if spec.kind != "segment":
                outputs[spec.index] = value
            result = value
        return result


def build_network(cfg: NetworkConfig) -> SegNetwork:
    """Construct the network, validating the shape chain first."""
    return SegNetwork(cfg)


@dataclass(frozen=True)
class AuditRow:
    index: int
    kind: str
    built: float
    expected: float | None

    @property
    def delta(self) -> float | None:
        return None if self.expected is None else self.built - self.expected


@dataclass(frozen=True)
class ParameterAudit:
    rows: tuple[AuditRow, ...]
    total: int
    fused_total: int
    expected_total: int | None
    expected_fused_total: int | None

    def to_table(self) -> str:
        lines = [f"{'layer':>5} {'kind':>8} {'params':>10} {'expected':>10} {'delta':>8}"]
        for row in self.rows:
            exp = "-" if row.expected is None else f"{int(row.expected)}"
            delta = "-" if row.delta is None else f"{int(row.delta):+d}"
            lines.append(
                f"{row.index:>5} {row.kind:>8} {int(row.built):>10} {exp:>10} {delta:>8}"
            )
        lines.append(
            f"total {self.total} (expected {self.expected_total}), "
            f"fused {self.fused_total} (expected {self.expected_fused_total})"
        )
        return "\n".join(lines)


def audit_parameters(model: SegNetwork) -> ParameterAudit:
    """Exact per-layer parameter counts compared to the declared targets.

    The fused total folds every normalization layer into its convolution
    (dropping 2 values per channel, adding a bias), matching deployment
    counts."""
    rows = []
    total = 0
    for spec in model.specs:
        built = module_params(model.layers[str(spec.index)])
        total += built
        rows.append(
            AuditRow(
                index=spec.index,
                kind=spec.kind,
                built=built,
                expected=spec.expected_params,
            )
        )
    bn_channels = sum(
        m.num_features for m in model.modules() if isinstance(m, nn.BatchNorm2d)
    )
    return ParameterAudit(
        rows=tuple(rows),
        total=total,
        fused_total=total - bn_channels,
        expected_total=model.cfg.expected_total_params,
        expected_fused_total=model.cfg.expected_fused_params,
    )


@dataclass(frozen=True)
class FlopAudit:
    rows: tuple[AuditRow, ...]
    total_gflops: float
    expected_total_gflops: float | None

    def to_table(self) -> str:
        lines = [f"{'layer':>5} {'kind':>8} {'gflops':>8} {'expected':>9}"]
        for row in self.rows:
            exp = "-" if row.expected is None else f"{row.expected:.2f}"
            lines.append(f"{row.index:>5} {row.kind:>8} {row.built:>8.3f} {exp:>9}")
        lines.append(
            f"total {self.total_gflops:.2f} GFLOPs "
            f"(expected {self.expected_total_gflops})"
        )
        return "\n".join(lines)


def _conv_macs(module: nn.Module, inputs, output) -> float:
    if isinstance(module, nn.Conv2d):
        out_elems = output.numel() / output.shape[0]
        return out_elems * (module.in_channels / module.groups) * (
            module.kernel_size[0] * module.kernel_size[1]
        )
    if isinstance(module, nn.ConvTranspose2d):
        in_elems = inputs[0].numel() / inputs[0].shape[0]
        return in_elems * (module.out_channels / module.groups) * (
            module.kernel_size[0] * module.kernel_size[1]
        )
    return 0.0


def audit_flops(
    model: SegNetwork, input_size: tuple[int, int, int] | None = None
) -> FlopAudit:
    """Per-layer GFLOPs (2 x multiply-accumulates) at the given input size."""
    c, h, w = input_size or (model.cfg.input_channels, *model.cfg.input_size)
    per_layer: dict[int, float] = {spec.index: 0.0 for spec in model.specs}
    handles = []

    def register(layer_index: int, module: nn.Module):
        def hook(mod, inputs, output):
            per_layer[layer_index] += _conv_macs(mod, inputs, output)

        for sub in module.modules():
            if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d)):
                handles.append(sub.register_forward_hook(hook))

    for spec in model.specs:
        register(spec.index, model.layers[str(spec.index)])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, c, h, w))
    for handle in handles:
        handle.remove()
    if was_training:
        model.train()

    rows = tuple(
        AuditRow(
            index=spec.index,
            kind=spec.kind,
            built=2.0 * per_layer[spec.index] / 1e9,
            expected=spec.expected_gflops,
        )
        for spec in model.specs
    )
    return FlopAudit(
        rows=rows,
        total_gflops=float(sum(r.built for r in rows)),
        expected_total_gflops=model.cfg.expected_total_gflops,
    )
