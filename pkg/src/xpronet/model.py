"""End-to-end model: prototype streams around a transformer encoder-decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import objectives, proto_net, seq_model
from .config import RunConfig
from .corpus import BOS, PAD, Sample
from .decoding import Hypothesis, beam_search, best_of, greedy_search
from .engine import ParamGroup, Tensor, ops
from .objectives import LossConfig
from .proto_net import ProtoNetConfig, QueryResult
from .seq_model import ModelConfig


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, C]
    tokens: np.ndarray  # [B, T] padded with PAD
    labels: np.ndarray  # [B, N_l]
    ids: list[str] = field(default_factory=list)

    @classmethod
    def collate(cls, samples: Sequence[Sample]) -> "Batch":
        t = max(len(s.report) for s in samples)
        tokens = np.full((len(samples), t), PAD, dtype=np.int64)
        for i, s in enumerate(samples):
            tokens[i, : len(s.report)] = s.report
        return cls(
            np.stack([s.image for s in samples]),
            tokens,
            np.stack([s.labels for s in samples]).astype(np.int64),
            [s.id for s in samples],
        )


@dataclass
class ForwardOutput:
    loss: Tensor
    ce: Tensor
    visual_contrastive: Tensor
    textual_contrastive: Tensor
    visual: QueryResult | None
    textual: QueryResult | None
    probs: Tensor


class XProNet:
    def __init__(self, cfg: RunConfig, vocab_size: int, pm: np.ndarray | None = None, seed: int | None = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng([seed, 1])
        self.use_prototypes = not cfg.disable_cmpnet
        self.proto_cfg = ProtoNetConfig(
            n_labels=cfg.n_labels,
            n_protos=cfg.n_prototypes,
            proto_dim=cfg.proto_dim,
            feature_dim=cfg.feature_dim,
            proj_dim=cfg.proto_proj_dim,
            query_dim=cfg.query_dim,
            heads=cfg.proto_heads,
            gamma=cfg.gamma,
            normalizer=cfg.normalizer,
        )
        self.model_cfg = ModelConfig(
            vocab_size=vocab_size,
            d_model=cfg.feature_dim,
            layers=cfg.layers,
            heads=cfg.heads,
            d_ff=cfg.ffn_dim,
            max_len=cfg.max_len,
            dropout=cfg.dropout,
        )
        self.loss_cfg = LossConfig(
            theta=cfg.theta,
            alpha=cfg.alpha,
            lam=cfg.lambda_visual,
            delta=cfg.delta_textual,
            clamp_positive=cfg.clamp_positive,
            use_tolerance=not cfg.disable_imlcs,
        )
        self.seq_params = seq_model.init_seq_params(self.model_cfg, rng)
        self.proto_params = proto_net.init_proto_params(self.proto_cfg, rng, pm) if self.use_prototypes else {}
        self.params: dict[str, Tensor] = {**self.proto_params, **self.seq_params}

    # -- parameters ---------------------------------------------------------

    def param_groups(self) -> list[ParamGroup]:
        groups = [ParamGroup(list(self.seq_params.values()), self.cfg.lr_model, "encoder-decoder")]
        if self.proto_params:
            groups.insert(0, ParamGroup(list(self.proto_params.values()), self.cfg.lr_prototype, "prototype"))
        return groups

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    # -- pieces -------------------------------------------------------------

    def category_mask(self, labels: np.ndarray | None, n: int, training: bool) -> np.ndarray:
        if training or (self.cfg.inference_label_mode == "oracle" and labels is not None):
            return proto_net.label_mask(labels)
        return np.ones((n, self.cfg.n_labels), dtype=bool)

    @staticmethod
    def patch_sequence(images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        b, h, w, c = images.shape
        return images.reshape(b, h * w, c)

    def visual_stream(self, images, mask, selection=None):
        v_s = Tensor(self.patch_sequence(images))
        if not self.use_prototypes:
            return None, v_s
        return proto_net.prototype_stream(v_s, self.params, self.proto_cfg, mask, selection)

    def textual_stream(self, tokens, mask, selection=None):
        v_t = seq_model.embed_report(tokens, self.params, self.model_cfg)
        if not self.use_prototypes:
            return None, v_t
        return proto_net.prototype_stream(v_t, self.params, self.proto_cfg, mask, selection)

    # -- training forward ---------------------------------------------------

    def forward(
        self,
        batch: Batch,
        rng: np.random.Generator | None = None,
        training: bool = True,
        selections: dict | None = None,
    ) -> ForwardOutput:
        """Teacher-forced forward pass and joint loss.

        ``rng`` enables dropout. ``selections`` replays the top-gamma choice
        of a previous call (keys ``visual``/``textual``).
        """
        b = len(batch.tokens)
        mask = self.category_mask(batch.labels, b, training)
        selections = selections or {}
        vis, l_s = self.visual_stream(batch.images, mask, selections.get("visual"))
        memory = seq_model.encode(l_s, self.params, self.model_cfg, rng)
        inputs, targets = batch.tokens[:, :-1], batch.tokens[:, 1:]
        txt, l_t = self.textual_stream(inputs, mask, selections.get("textual"))
        logits = seq_model.decode(memory, l_t, self.params, self.model_cfg, rng)
        probs = ops.softmax(logits, axis=-1)
        ce = objectives.cross_entropy(probs, targets, targets != PAD)
        if self.use_prototypes:
            l_vis = objectives.improved_contrastive(vis.responses, batch.labels, self.loss_cfg)
            l_txt = objectives.improved_contrastive(txt.responses, batch.labels, self.loss_cfg, keep=inputs != PAD)
        else:
            l_vis = l_txt = Tensor(0.0)
        loss = objectives.total_loss(ce, l_vis, l_txt, self.loss_cfg.lam, self.loss_cfg.delta)
        return ForwardOutput(loss, ce, l_vis, l_txt, vis, txt, probs)

    # -- generation ---------------------------------------------------------

    def encode_images(self, images, labels=None):
        mask = self.category_mask(labels, len(images), training=False)
        vis, l_s = self.visual_stream(images, mask)
        return seq_model.encode(l_s, self.params, self.model_cfg), mask, vis

    def make_step_fn(self, memory: Tensor, mask: np.ndarray):
        """Next-token log-probabilities for decoding.

        The textual prototype stream is position-local, so only the newest
        token of each prefix is queried; earlier positions are reused from
        the parent prefix of the previous step.
        """
        cache: dict[tuple[int, bytes], np.ndarray] = {}

        def step(prefixes: np.ndarray, owners: np.ndarray) -> np.ndarray:
            t = prefixes.shape[1]
            positions = seq_model.embed_report(prefixes, self.params, self.model_cfg).data[:, -1:, :]
            if self.use_prototypes:
                _, newest = proto_net.prototype_stream(positions, self.params, self.proto_cfg, mask[owners])
                newest = newest.data
            else:
                newest = positions
            if t == 1:
                l_t = newest
            else:
                parents = np.stack([cache[(int(o), p[:-1].tobytes())] for o, p in zip(owners, prefixes)])
                l_t = np.concatenate([parents, newest], axis=1)
            cache.clear()
            for o, p, row in zip(owners, prefixes, l_t):
                cache[(int(o), p.tobytes())] = row
            logits = seq_model.decode(Tensor(memory.data[owners]), Tensor(l_t), self.params, self.model_cfg).data[:, -1, :]
            z = logits - logits.max(axis=-1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

        return step

    def generate(
        self,
        images: np.ndarray,
        mode: str | None = None,
        beam_size: int | None = None,
        max_len: int | None = None,
        labels: np.ndarray | None = None,
        length_normalize: bool | None = None,
    ) -> list[Hypothesis]:
        """Decode reports for a batch of images (no tape is involved)."""
        mode = mode or self.cfg.decode_mode
        beam_size = beam_size or self.cfg.beam_size
        max_len = min(max_len or self.cfg.max_len, self.cfg.max_len)
        norm = self.cfg.length_normalize if length_normalize is None else length_normalize
        memory, mask, _ = self.encode_images(images, labels)
        step = self.make_step_fn(memory, mask)
        n = len(images)
        greedy = greedy_search(step, n, max_len - 1)
        if mode == "greedy":
            return greedy
        beams = beam_search(step, n, beam_size, max_len - 1, norm)
        # the greedy path competes too, so beam output never scores below it
        return [best_of([bh, gh], norm) for bh, gh in zip(beams, greedy)]


def _selection_record(result: QueryResult, position: int, n_protos: int) -> list[dict]:
    heads = []
    for h in range(result.indices.shape[-3]):
        idx = result.indices[0, h, position]
        w = result.weights[0, h, position]
        keep = idx >= 0
        heads.append(
            {
                "head": h,
                "prototypes": [list(divmod(int(m), n_protos)) for m in idx[keep]],
                "weights": [float(x) for x in w[keep]],
            }
        )
    return heads


def inspect_sample(model: XProNet, image: np.ndarray, labels: np.ndarray | None = None, mode: str | None = None) -> list[dict]:
    """Prototype selections for every patch and every generated token of one image.

    Each generated token is aligned to the patch with the largest head-averaged
    cross-attention in the last decoder block at the step that produced it;
    ``overlap`` counts the prototypes the token and that patch share, per head.
    """
    if not model.use_prototypes:
        raise ValueError("inspection needs the prototype pipeline (disable_cmpnet is set)")
    images = np.asarray(image, dtype=np.float64)[None]
    batch_labels = None if labels is None else np.asarray(labels)[None]
    hyp = model.generate(images, mode=mode, labels=batch_labels)[0]
    memory, mask, vis = model.encode_images(images, batch_labels)
    seq = np.array([[BOS] + hyp.tokens], dtype=np.int64)
    txt, l_t = model.textual_stream(seq, mask)
    trace: dict = {}
    seq_model.decode(memory, l_t, model.params, model.model_cfg, trace=trace)
    cross = trace[f"seq.dec{model.model_cfg.layers - 1}.cross"][0].mean(axis=0)  # [T, patches]
    n_protos = model.proto_cfg.n_protos
    width = images.shape[2]
    records: list[dict] = [{"kind": "report", "tokens": hyp.tokens, "log_prob": hyp.log_prob}]
    for p in range(vis.indices.shape[-2]):
        records.append({"kind": "patch", "patch": p, "row": p // width, "col": p % width,
                        "heads": _selection_record(vis, p, n_protos)})
    for j, tok in enumerate(hyp.tokens, start=1):
        aligned = int(np.argmax(cross[j - 1]))
        token_heads = _selection_record(txt, j, n_protos)
        patch_heads = _selection_record(vis, aligned, n_protos)
        overlap = [
            len({tuple(x) for x in th["prototypes"]} & {tuple(x) for x in ph["prototypes"]})
            for th, ph in zip(token_heads, patch_heads)
        ]
        records.append({"kind": "token", "position": j, "token": int(tok), "aligned_patch": aligned,
                        "overlap": overlap, "heads": token_heads})
    return records
