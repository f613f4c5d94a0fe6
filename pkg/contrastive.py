"""Temperature-scaled contrastive loss shared by the global and local modules."""
from dataclasses import dataclass
import logging

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class CollapsedEmbeddingError(ValueError):
    """An embedding with zero norm reached a cosine similarity."""


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class EmbeddingBatch:
    """M embeddings plus, for each one, the index of its positive partner."""
    vectors: torch.Tensor
    pair_index: torch.Tensor

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[1] < 1:
            raise ValueError(f"vectors must be (M, D) with D >= 1, got {tuple(self.vectors.shape)}")
        m = self.vectors.shape[0]
        pair = torch.as_tensor(self.pair_index, dtype=torch.long, device=self.vectors.device)
        if pair.shape != (m,):
            raise ValueError(f"pair_index must have length {m}, got {tuple(pair.shape)}")
        if ((pair < 0) | (pair >= m)).any():
            raise ValueError("pair_index points outside the batch")
        positions = torch.arange(m, device=pair.device)
        if (pair == positions).any():
            raise ValueError("pair_index has a fixed point: an embedding cannot be its own positive")
        if not torch.equal(pair[pair], positions):
            raise ValueError("pair_index must be an involution (partners must point back)")
        self.pair_index = pair

    @classmethod
    def from_views(cls, z_a, z_b):
        """Row i of z_a is the positive of row i of z_b."""
        if z_a.shape != z_b.shape:
            raise ValueError(f"view embeddings differ in shape: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
        n = z_a.shape[0]
        pair = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
        return cls(torch.cat([z_a, z_b], dim=0), pair)

    @property
    def num_sources(self):
        return self.vectors.shape[0] // 2


def _check_norms(vectors):
    norms = vectors.norm(dim=-1)
    if (norms == 0).any():
        rows = torch.nonzero(norms == 0).flatten().tolist()
        raise CollapsedEmbeddingError(f"zero-norm embedding at rows {rows}")
    return norms


def cosine_similarity(u, v):
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    _check_norms(torch.stack([u, v]))
    sim = torch.dot(u, v) / (u.norm() * v.norm())
    return float(sim.clamp(-1.0, 1.0))


def nt_xent_loss(batch: EmbeddingBatch, cfg: ContrastiveConfig = ContrastiveConfig()):
    """Mean over all 2N anchors of -log(exp(s_pos/t) / sum_neg exp(s_neg/t)).

    By default the denominator holds only the 2(N-1) negatives of each
    anchor, so the loss can be negative. With include_positive_in_denominator
    the positive joins the sum (the usual SimCLR form).
    """
    z = batch.vectors
    m = z.shape[0]
    if m < 4:
        raise ValueError(f"need at least two source samples (M >= 4), got M={m}")
    _check_norms(z)

    z = F.normalize(z, dim=-1)
    logits = z @ z.T / cfg.temperature
    positions = torch.arange(m, device=z.device)
    positive = logits[positions, batch.pair_index]

    keep = ~torch.eye(m, dtype=torch.bool, device=z.device)
    if not cfg.include_positive_in_denominator:
        keep[positions, batch.pair_index] = False
    # logsumexp subtracts the per-anchor max before exponentiating
    denominator = torch.logsumexp(logits.masked_fill(~keep, float('-inf')), dim=1)
    return (denominator - positive).mean()


def nt_xent(z_a, z_b, cfg: ContrastiveConfig = ContrastiveConfig()):
    return nt_xent_loss(EmbeddingBatch.from_views(z_a, z_b), cfg)
