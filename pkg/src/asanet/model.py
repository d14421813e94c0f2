"""The five-branch attribute-assisted re-identification network.

A shared toy backbone turns each frame into a C-channel map. Three residual
branches derive an ID-relevant attribute map (C/2 channels), an identity map
(2C channels) and an ID-irrelevant attribute map (C/2 channels). Two
cross-attention enhancement modules build a spatial saliency mask over the
(channel-reduced) identity map from each attribute map and additively
re-weight it. Pooled branch features feed two multi-label attribute heads,
an identity classifier behind a feature batch norm (metric losses consume the
pre-norm feature), and one of two fusion strategies:

  strategy "a": concat(FC(re_id), FC(id), FC(ir_id), FC(re_attr))
  strategy "b": concat(FC(re_id), FC(id), FC(ir_id), FC(concat(re_attr, ir_attr)))

Every reduced part has width C/4, so the fused feature has width C when all
three branches and the attribute part are enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv1x1, Conv3x3, Linear, ParamRegistry
from .tensor import Tensor

BRANCH_NAMES = ("identity", "re", "ir")


@dataclass
class ModelConfig:
    channels: int = 32            # backbone output channels C
    frames_per_clip: int = 6      # frames sampled per tracklet (T)
    image_height: int = 64
    image_width: int = 32
    num_identities: int = 20      # classifier size M
    num_re_attrs: int = 14        # ID-relevant binary outputs
    num_ir_attrs: int = 7         # ID-irrelevant binary outputs
    fusion: str = "b"
    use_asre: bool = True
    branches: tuple[str, ...] = BRANCH_NAMES
    fuse_attributes: bool = True

    def __post_init__(self):
        if self.channels % 4 != 0 or self.channels <= 0:
            raise ConfigError(f"channels must be a positive multiple of 4, got {self.channels}")
        if self.fusion not in ("a", "b"):
            raise ConfigError(f"fusion strategy must be 'a' or 'b', got {self.fusion!r}")
        self.branches = tuple(self.branches)
        if not self.branches or any(b not in BRANCH_NAMES for b in self.branches):
            raise ConfigError(f"branches must be a nonempty subset of {BRANCH_NAMES}")
        if self.image_height % 4 or self.image_width % 4:
            raise ConfigError("image extents must be divisible by 4 (backbone downsamples x4)")
        if self.num_re_attrs <= 0 or self.num_ir_attrs <= 0:
            raise ConfigError("attribute output counts must be positive")

    @property
    def feat_width(self) -> int:
        return self.channels // 4

    @property
    def final_width(self) -> int:
        parts = len(self.branches) + (1 if self.fuse_attributes else 0)
        return parts * self.feat_width

    @property
    def map_height(self) -> int:
        return self.image_height // 4

    @property
    def map_width(self) -> int:
        return self.image_width // 4

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "frames_per_clip": self.frames_per_clip,
            "image_height": self.image_height,
            "image_width": self.image_width,
            "num_identities": self.num_identities,
            "num_re_attrs": self.num_re_attrs,
            "num_ir_attrs": self.num_ir_attrs,
            "fusion": self.fusion,
            "use_asre": self.use_asre,
            "branches": list(self.branches),
            "fuse_attributes": self.fuse_attributes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "branches" in d:
            d["branches"] = tuple(d["branches"])
        return cls(**d)


@dataclass
class BranchMaps:
    """Per-frame feature maps of the three residual branches."""
    re_attr: Tensor   # (N, C/2, H, W)
    identity: Tensor  # (N, 2C, H, W)
    ir_attr: Tensor   # (N, C/2, H, W)


@dataclass
class NetworkOutputs:
    """Batched forward results; feature tensors are (B, width)."""
    re_attr_feat: Tensor
    re_id_feat: Tensor
    id_feat: Tensor
    ir_id_feat: Tensor
    ir_attr_feat: Tensor
    final_feat: Tensor
    re_attr_prob: Tensor
    ir_attr_prob: Tensor
    id_logits: Tensor
    masks: dict = field(default_factory=dict)  # branch -> (B, T, H, W) arrays


@dataclass
class FeatureBundle:
    """Single-tracklet view of the forward results."""
    re_attr_feat: Tensor
    re_id_feat: Tensor
    id_feat: Tensor
    ir_id_feat: Tensor
    ir_attr_feat: Tensor
    final_feat: Tensor
    re_attr_prob: Tensor
    ir_attr_prob: Tensor
    id_logits: Tensor


class AsreModule:
    """Cross-attention saliency enhancement of the identity feature map.

    Each identity-map pixel attends over all attribute-map pixels (ReLU'd
    1x1-projected queries/keys, scaled by sqrt(d_k), softmax per row). The
    attended value map is batch-normalized (frames act as the batch axis),
    reduced to one channel and squashed through a sigmoid to form the
    saliency mask, which re-weights the identity map through a learnable
    residual blend:  out = x_id + alpha * (mask (*) x_id).
    """

    def __init__(self, reg: ParamRegistry, name: str, attr_channels: int,
                 id_channels: int, rng):
        d_k = id_channels  # projection width equals the reduced feature width
        self.d_k = d_k
        self.query = Conv1x1(reg, f"{name}.query", id_channels, d_k, rng)
        self.key = Conv1x1(reg, f"{name}.key", attr_channels, d_k, rng)
        self.value = Conv1x1(reg, f"{name}.value", attr_channels, id_channels, rng)
        self.mask_bn = BatchNorm(reg, f"{name}.mask_bn", id_channels)
        self.mask_conv = Conv1x1(reg, f"{name}.mask", id_channels, 1, rng)
        self.alpha = reg.register(f"{name}.alpha", 1.0, decay=False)
        self.norms = [self.mask_bn]

    def attention(self, x_attr: Tensor, x_id: Tensor) -> Tensor:
        """Row-stochastic (N, HW, HW) map: identity pixels over attribute pixels."""
        n, _, h, w = x_id.shape
        hw = h * w
        q = T.relu(self.query(x_id))         # (N, d_k, H, W)
        k = T.relu(self.key(x_attr))         # (N, d_k, H, W)
        q_flat = T.transpose(T.reshape(q, (n, self.d_k, hw)), (0, 2, 1))
        k_flat = T.reshape(k, (n, self.d_k, hw))
        scores = T.matmul(q_flat, k_flat) * (1.0 / math.sqrt(self.d_k))
        return T.softmax_rows(scores)

    def __call__(self, x_attr: Tensor, x_id: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (enhanced identity map (N, C/4, H, W), mask (N, H, W))."""
        if x_attr.ndim != 4 or x_id.ndim != 4:
            raise ShapeError("asre inputs must be (N, C, H, W)")
        if x_attr.shape[2:] != x_id.shape[2:] or x_attr.shape[0] != x_id.shape[0]:
            raise ShapeError(
                f"asre spatial extents differ: {x_attr.shape} vs {x_id.shape}"
            )
        n, c_id, h, w = x_id.shape
        hw = h * w

        att = self.attention(x_attr, x_id)                     # (N, HW, HW)
        v = self.value(x_attr)                                 # (N, C/4, H, W)
        v_flat = T.transpose(T.reshape(v, (n, c_id, hw)), (0, 2, 1))
        attended = T.matmul(att, v_flat)                       # (N, HW, C/4)
        x_v = T.reshape(T.transpose(attended, (0, 2, 1)), (n, c_id, h, w))
        mask = T.sigmoid(self.mask_conv(self.mask_bn(x_v)))    # (N, 1, H, W)
        alpha = T.reshape(self.alpha, (1, 1, 1, 1))
        out = x_id + alpha * (mask * x_id)
        return out, T.reshape(mask, (n, h, w))


class AttributeHead:
    """Pooled attribute feature (width C/4) and per-category sigmoid scores."""

    def __init__(self, reg: ParamRegistry, name: str, in_width: int,
                 feat_width: int, num_outputs: int, rng):
        self.reduce = Linear(reg, f"{name}.reduce", in_width, feat_width, rng)
        self.bn = BatchNorm(reg, f"{name}.bn", feat_width)
        self.predict = Linear(reg, f"{name}.predict", feat_width, num_outputs, rng)
        self.norms = [self.bn]

    def __call__(self, attr_map: Tensor, batch: int, frames: int) -> tuple[Tensor, Tensor]:
        pooled = nn.spatial_pool(attr_map)                       # (B*T, C/2)
        pooled = nn.temporal_pool(T.reshape(pooled, (batch, frames, pooled.shape[-1])))
        feat = self.reduce(pooled)                               # (B, C/4)
        prob = T.sigmoid(self.predict(T.relu(self.bn(feat))))
        return feat, prob


class Fusion:
    """Combines branch features into the final descriptor per strategy a/b."""

    def __init__(self, reg: ParamRegistry, name: str, feat_width: int,
                 strategy: str, branches: tuple[str, ...], fuse_attributes: bool, rng):
        self.strategy = strategy
        self.branches = branches
        self.fuse_attributes = fuse_attributes
        self.fc = {}
        for branch in branches:
            key = {"identity": "id", "re": "re_id", "ir": "ir_id"}[branch]
            self.fc[key] = Linear(reg, f"{name}.{key}", feat_width, feat_width, rng)
        if fuse_attributes:
            attr_in = feat_width if strategy == "a" else 2 * feat_width
            self.fc["attr"] = Linear(reg, f"{name}.attr", attr_in, feat_width, rng)

    def __call__(self, feats: dict[str, Tensor]) -> Tensor:
        parts = []
        for branch in self.branches:
            key = {"identity": "id", "re": "re_id", "ir": "ir_id"}[branch]
            parts.append(self.fc[key](feats[key]))
        if self.fuse_attributes:
            if self.strategy == "a":
                parts.append(self.fc["attr"](feats["re_attr"]))
            else:
                joint = T.concat([feats["re_attr"], feats["ir_attr"]], axis=1)
                parts.append(self.fc["attr"](joint))
        return T.concat(parts, axis=1)


def fuse_features(fusion: Fusion, re_attr: Tensor, re_id: Tensor, id_feat: Tensor,
                  ir_id: Tensor, ir_attr: Tensor) -> Tensor:
    """Apply a fusion module to the five branch features."""
    return fusion({
        "re_attr": re_attr, "re_id": re_id, "id": id_feat,
        "ir_id": ir_id, "ir_attr": ir_attr,
    })


class AsaNet:
    """Full network: backbone, branches, enhancement modules, heads, fusion."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.registry = ParamRegistry()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA5A]))
        reg = self.registry
        c = config.channels
        half, quarter, double = c // 2, c // 4, 2 * c

        # Toy backbone: 3x3 stride-2 conv, BN, ReLU, 2x2 mean pool, residual
        # block with a 3x3 main path. Two downsampling stages take 64x32
        # inputs to 16x8 maps; the block's 3x3 widens the receptive field
        # enough to see whole-body geometry (stride, lean, proportions).
        self.stem = Conv3x3(reg, "backbone.stem", 3, c, rng, stride=2)
        self.stem_bn = BatchNorm(reg, "backbone.bn", c)
        self.stem_block = nn.ResidualBlock(reg, "backbone.block", c, c, rng, spatial=True)

        self.branch_re = nn.ResidualBlock(reg, "branch_re", c, half, rng)
        self.branch_id = nn.ResidualBlock(reg, "branch_id", c, double, rng)
        self.branch_ir = nn.ResidualBlock(reg, "branch_ir", c, half, rng)

        # 1x1 reductions of the identity map feeding the two enhancement
        # modules and the plain identity feature.
        self.reduce_re = Conv1x1(reg, "reduce_re", double, quarter, rng)
        self.reduce_ir = Conv1x1(reg, "reduce_ir", double, quarter, rng)
        self.reduce_id = Conv1x1(reg, "reduce_id", double, quarter, rng)

        self.asre_re = AsreModule(reg, "asre_re", half, quarter, rng)
        self.asre_ir = AsreModule(reg, "asre_ir", half, quarter, rng)

        self.fc_re = Linear(reg, "fc_re", quarter, quarter, rng)
        self.fc_ir = Linear(reg, "fc_ir", quarter, quarter, rng)

        self.head_re = AttributeHead(reg, "head_re", half, quarter, config.num_re_attrs, rng)
        self.head_ir = AttributeHead(reg, "head_ir", half, quarter, config.num_ir_attrs, rng)

        self.fusion = Fusion(reg, "fusion", quarter, config.fusion,
                             config.branches, config.fuse_attributes, rng)
        self.neck_bn = BatchNorm(reg, "neck.bn", config.final_width)
        self.classifier = Linear(reg, "classifier", config.final_width,
                                 config.num_identities, rng)

        self._norms = [self.stem_bn, self.neck_bn]
        for block in (self.stem_block, self.branch_re, self.branch_id, self.branch_ir):
            self._norms.extend(block.norms)
        for mod in (self.asre_re, self.asre_ir, self.head_re, self.head_ir):
            self._norms.extend(mod.norms)
        self.training = True

    # -- mode switches ------------------------------------------------------

    def train_mode(self, update_running: bool = True) -> None:
        self.training = True
        for bn in self._norms:
            bn.training = True
            bn.update_running = update_running

    def eval_mode(self) -> None:
        self.training = False
        for bn in self._norms:
            bn.training = False

    # -- forward pieces ------------------------------------------------------

    def backbone_forward(self, frames: Tensor) -> Tensor:
        """Shared trunk: (N, 3, H0, W0) -> (N, C, H0/4, W0/4)."""
        cfg = self.config
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"backbone expects (N, 3, H, W), got {frames.shape}")
        if frames.shape[2] != cfg.image_height or frames.shape[3] != cfg.image_width:
            raise ShapeError(
                f"frame extents {frames.shape[2:]} do not match configured "
                f"{(cfg.image_height, cfg.image_width)}"
            )
        h = T.relu(self.stem_bn(self.stem(frames)))
        h = nn.mean_pool_2x2(h)
        return self.stem_block(h)

    def branches_forward(self, trunk: Tensor) -> BranchMaps:
        """Three independent residual branches over the shared trunk output."""
        return BranchMaps(
            re_attr=self.branch_re(trunk),
            identity=self.branch_id(trunk),
            ir_attr=self.branch_ir(trunk),
        )

    def _enhanced_feat(self, which: str, maps: BranchMaps, batch: int,
                       frames: int) -> tuple[Tensor, np.ndarray | None]:
        """Enhanced identity feature for the re / ir side: (B, C/4)."""
        reduce = self.reduce_re if which == "re" else self.reduce_ir
        asre = self.asre_re if which == "re" else self.asre_ir
        head_fc = self.fc_re if which == "re" else self.fc_ir
        attr_map = maps.re_attr if which == "re" else maps.ir_attr

        x_id = reduce(maps.identity)
        mask_frames = None
        if self.config.use_asre:
            enhanced, mask = asre(attr_map, x_id)
            h, w = mask.shape[1:]
            mask_frames = mask.data.reshape(batch, frames, h, w)
        else:
            enhanced = x_id
        pooled = nn.spatial_pool(enhanced)
        pooled = nn.temporal_pool(T.reshape(pooled, (batch, frames, pooled.shape[-1])))
        return head_fc(pooled), mask_frames

    def id_feature(self, identity_map: Tensor, batch: int, frames: int) -> Tensor:
        """Reduced plain identity feature: (B, C/4)."""
        x = self.reduce_id(identity_map)
        pooled = nn.spatial_pool(x)
        return nn.temporal_pool(T.reshape(pooled, (batch, frames, pooled.shape[-1])))

    def classify(self, final_feat: Tensor) -> Tensor:
        """Identity logits from the post-norm feature (metric losses use pre-norm)."""
        return self.classifier(self.neck_bn(final_feat))

    def forward_batch(self, frames: Tensor | np.ndarray) -> NetworkOutputs:
        """Run clips (B, T, 3, H0, W0) through the whole graph."""
        if not isinstance(frames, Tensor):
            frames = Tensor(frames)
        if frames.ndim != 5:
            raise ShapeError(f"forward_batch expects (B, T, 3, H, W), got {frames.shape}")
        b, t = frames.shape[:2]
        flat = T.reshape(frames, (b * t,) + frames.shape[2:])

        trunk = self.backbone_forward(flat)
        maps = self.branches_forward(trunk)

        re_attr_feat, re_attr_prob = self.head_re(maps.re_attr, b, t)
        ir_attr_feat, ir_attr_prob = self.head_ir(maps.ir_attr, b, t)
        re_id_feat, re_masks = self._enhanced_feat("re", maps, b, t)
        ir_id_feat, ir_masks = self._enhanced_feat("ir", maps, b, t)
        id_feat = self.id_feature(maps.identity, b, t)

        final = fuse_features(self.fusion, re_attr_feat, re_id_feat, id_feat,
                              ir_id_feat, ir_attr_feat)
        logits = self.classify(final)

        masks = {}
        if re_masks is not None:
            masks = {"re": re_masks, "ir": ir_masks}
        return NetworkOutputs(
            re_attr_feat=re_attr_feat, re_id_feat=re_id_feat, id_feat=id_feat,
            ir_id_feat=ir_id_feat, ir_attr_feat=ir_attr_feat, final_feat=final,
            re_attr_prob=re_attr_prob, ir_attr_prob=ir_attr_prob,
            id_logits=logits, masks=masks,
        )

    def forward_full(self, frames: Tensor | np.ndarray) -> list[FeatureBundle]:
        """Per-tracklet bundles for a batch of clips."""
        out = self.forward_batch(frames)
        bundles = []
        for i in range(out.final_feat.shape[0]):
            bundles.append(FeatureBundle(
                re_attr_feat=Tensor(out.re_attr_feat.data[i]),
                re_id_feat=Tensor(out.re_id_feat.data[i]),
                id_feat=Tensor(out.id_feat.data[i]),
                ir_id_feat=Tensor(out.ir_id_feat.data[i]),
                ir_attr_feat=Tensor(out.ir_attr_feat.data[i]),
                final_feat=Tensor(out.final_feat.data[i]),
                re_attr_prob=Tensor(out.re_attr_prob.data[i]),
                ir_attr_prob=Tensor(out.ir_attr_prob.data[i]),
                id_logits=Tensor(out.id_logits.data[i]),
            ))
        return bundles


# ---------------------------------------------------------------------------
# mask export
# ---------------------------------------------------------------------------

def write_pgm(path: Path, values: np.ndarray) -> None:
    """Write a (H, W) float array in [0, 1] as a binary 8-bit PGM."""
    scaled = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def export_masks(masks: dict[str, np.ndarray], tracklet_ids, out_dir) -> list[Path]:
    """Write saliency masks as masks/<tracklet>/<branch>_<frame>.pgm files."""
    out_dir = Path(out_dir)
    written = []
    for branch, stack in masks.items():
        for row, tid in enumerate(tracklet_ids):
            tdir = out_dir / "masks" / str(tid)
            tdir.mkdir(parents=True, exist_ok=True)
            for f in range(stack.shape[1]):
                path = tdir / f"{branch}_{f:03d}.pgm"
                write_pgm(path, stack[row, f])
                written.append(path)
    return written
