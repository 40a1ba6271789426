"""Full network assembly and the forward passes used in training and eval.

Parameters are always constructed (in a fixed order from one seeded
generator) regardless of module toggles, so ablations share identical
initial weights; toggles only decide which parameters are trained and
which stages run. The deployed representation is the L2-normalized
concatenation of the pooled long- and short-range enhanced features of an
image's own modality; middle features exist only inside training batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .cfl import GatParams, build_middle, pooled_descriptor
from .hsl import (EnhancedQuad, HslParams, IncidenceParams, WhiteningParams,
                  enhance_quad)
from .losses import ClassifierParams
from .sle import (ConvBranchParams, SleParams, StemParams,
                  TransformerBlockParams, TransformerBranchParams,
                  extract_quad, sinusoidal_positions, stem_forward)
from .tensor import ContractError, Parameter, Tensor


@dataclass
class BatchForward:
    """Everything the joint loss needs from one PK pair batch."""

    pooled: dict                 # (modality, range) -> (P*K, C') descriptors
    middles: Optional[dict]      # same keys, or None when CFL is off
    incidences: list             # IncidenceMatrix per quad entry (HSL on)
    inference: Tensor            # (2*P*K, D), VIS block then IR block
    inference_labels: np.ndarray


class Network:
    def __init__(self, cfg: dict, rng: np.random.Generator, num_classes: int):
        self.cfg = cfg
        self.num_classes = num_classes
        c = cfg["sle.channels"]
        cin = cfg["data.channels"]
        n = cfg["sle.grid_h"] * cfg["sle.grid_w"]
        m = cfg["hsl.hyperedges"]
        ffn = cfg["sle.ffn_mult"] * c
        self._params: list[Parameter] = []

        def param(name, array):
            p = Parameter(name, Tensor(array))
            if any(q.name == name for q in self._params):
                raise ContractError(f"duplicate parameter name {name!r}")
            self._params.append(p)
            return p.value

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        he = lambda fan_in: np.sqrt(2.0 / fan_in)
        lin = lambda fan_in: 1.0 / np.sqrt(fan_in)

        self.stem = StemParams(
            w1_vis=param("stem.vis.w", normal((9 * cin, c), he(9 * cin))),
            b1_vis=param("stem.vis.b", np.zeros(c)),
            w1_ir=param("stem.ir.w", normal((9 * cin, c), he(9 * cin))),
            b1_ir=param("stem.ir.b", np.zeros(c)),
            w2=param("stem.shared.w", normal((9 * c, c), he(9 * c))),
            b2=param("stem.shared.b", np.zeros(c)))

        weights, biases = [], []
        for i in range(cfg["sle.conv_blocks"]):
            weights.append(param(f"cb.{i}.w", normal((9 * c, c), he(9 * c))))
            biases.append(param(f"cb.{i}.b", np.zeros(c)))
        conv = ConvBranchParams(weights, biases)

        blocks = []
        for i in range(cfg["sle.transformer_blocks"]):
            blocks.append(TransformerBlockParams(
                wq=param(f"tb.{i}.wq", normal((c, c), lin(c))),
                wk=param(f"tb.{i}.wk", normal((c, c), lin(c))),
                wv=param(f"tb.{i}.wv", normal((c, c), lin(c))),
                wo=param(f"tb.{i}.wo", normal((c, c), lin(c))),
                w1=param(f"tb.{i}.ffn.w1", normal((c, ffn), he(c))),
                b1=param(f"tb.{i}.ffn.b1", np.zeros(ffn)),
                w2=param(f"tb.{i}.ffn.w2", normal((ffn, c), lin(ffn))),
                b2=param(f"tb.{i}.ffn.b2", np.zeros(c))))
        transformer = TransformerBranchParams(
            blocks, Tensor(sinusoidal_positions(n, c)), cfg["sle.heads"])
        self.sle = SleParams(self.stem, conv, transformer,
                             cfg["sle.grid_h"], cfg["sle.grid_w"], c)

        self.hsl = HslParams(
            WhiteningParams(
                gamma=param("hsl.gamma", np.ones((n, 1))),
                beta=param("hsl.beta", np.zeros((n, c))),
                eps_cov=cfg["hsl.eps_cov"]),
            IncidenceParams(
                psi=param("hsl.psi", normal((c, c), lin(c))),
                lambda_diag=param("hsl.lambda", np.full(c, 0.05)),
                omega=param("hsl.omega", normal((c, m), lin(c))),
                edge_weights=param("hsl.edge_w", np.ones(m)),
                theta=param("hsl.theta", normal((c, c), 0.3 * lin(c))),
                eps_deg=cfg["hsl.eps_deg"]))

        self.gat = GatParams(
            theta_q=param("cfl.wq", normal((c, c), lin(c))),
            theta_k=param("cfl.wk", normal((c, c), lin(c))),
            theta_v=param("cfl.wv", normal((c, c), lin(c))),
            lambda_thresh=cfg["cfl.lambda"])
        self.concat_proj = param("cfl.concat_proj", normal((3 * c, c), lin(3 * c)))

        feat_len = 2 * (1 + cfg["cfl.parts"]) * c
        # Unit-std rows give O(1) logit spread on unit-norm features; smaller
        # inits leave the softmax near-uniform for too long and the metric
        # losses contract the feature cloud before classification bites.
        self.classifier = ClassifierParams(
            weight=param("cls.w", normal((num_classes, feat_len), 1.0)),
            bias=param("cls.b", np.zeros(num_classes)))
        self.feature_length = feat_len

    # -- parameter registry ---------------------------------------------------

    def all_parameters(self) -> list[Parameter]:
        return list(self._params)

    def trainable_parameters(self) -> list[Parameter]:
        """The update set implied by the module toggles."""
        cfg = self.cfg
        names: set[str] = set()
        for p in self._params:
            head = p.name.split(".", 1)[0]
            if head in ("stem", "cb", "tb", "cls"):
                names.add(p.name)
            elif head == "hsl" and cfg["hsl.enabled"]:
                if p.name in ("hsl.gamma", "hsl.beta") and not cfg["hsl.whitening"]:
                    continue
                names.add(p.name)
            elif head == "cfl" and cfg["cfl.enabled"]:
                if p.name == "cfl.concat_proj":
                    if cfg["cfl.fusion"] == "concat":
                        names.add(p.name)
                elif cfg["cfl.fusion"] == "gat":
                    names.add(p.name)
        return [p for p in self._params if p.name in names]

    # -- forward passes --------------------------------------------------------

    def _enhance(self, quad) -> tuple[EnhancedQuad, list]:
        if self.cfg["hsl.enabled"]:
            return enhance_quad(quad, self.hsl, whitening=self.cfg["hsl.whitening"])
        return EnhancedQuad(quad.long_vis, quad.short_vis,
                            quad.long_ir, quad.short_ir), []

    def _descriptor(self, feature) -> Tensor:
        return pooled_descriptor(feature, self.cfg["cfl.parts"], self.cfg["cfl.gem_power"])

    def _inference_from_pooled(self, long_desc, short_desc) -> Tensor:
        return ops.l2_normalize_rows(ops.concat([long_desc, short_desc], axis=-1))

    def forward_pairs(self, vis_images: np.ndarray, ir_images: np.ndarray,
                      labels: np.ndarray) -> BatchForward:
        """Paired batch forward: stem, branches, enhancement, middles, pooling."""
        b_vis = stem_forward(self.stem, Tensor(vis_images), "vis")
        b_ir = stem_forward(self.stem, Tensor(ir_images), "ir")
        quad = extract_quad(self.sle, b_vis, b_ir)
        enhanced, incidences = self._enhance(quad)
        pooled = {key: self._descriptor(f) for key, f in enhanced.items()}
        middles = None
        if self.cfg["cfl.enabled"]:
            mid = build_middle(enhanced, self.gat, self.cfg["cfl.fusion"],
                               self.concat_proj)
            middles = {key: self._descriptor(f) for key, f in mid.items()}
        inf_vis = self._inference_from_pooled(pooled[("vis", "long")], pooled[("vis", "short")])
        inf_ir = self._inference_from_pooled(pooled[("ir", "long")], pooled[("ir", "short")])
        inference = ops.concat([inf_vis, inf_ir], axis=0)
        labels2 = np.concatenate([labels, labels])
        return BatchForward(pooled, middles, incidences, inference, labels2)

    def encode(self, images: np.ndarray, modality: str) -> Tensor:
        """Deployed representation of same-modality images; CFL excluded."""
        base = stem_forward(self.stem, Tensor(images), modality)
        bsz = base.shape[0]
        n = self.sle.grid_h * self.sle.grid_w
        c = self.sle.channels
        from .sle import conv_branch, transformer_branch
        short = ops.reshape(conv_branch(self.sle.conv, base), (bsz, n, c))
        long = transformer_branch(self.sle.transformer, ops.reshape(base, (bsz, n, c)))
        if self.cfg["hsl.enabled"]:
            from .hsl import hypergraph_convolve, learn_incidence, whiten_nodes
            out = []
            for f in (long, short):
                fw = whiten_nodes(f, self.hsl.whitening) if self.cfg["hsl.whitening"] else f
                inc = learn_incidence(fw, self.hsl.incidence)
                out.append(hypergraph_convolve(f, fw, inc, self.hsl.incidence))
            long, short = out
        return self._inference_from_pooled(self._descriptor(long), self._descriptor(short))
