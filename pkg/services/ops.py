import math

import torch

DTYPE = torch.float64


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of `scores` within each group of entries sharing a `segment` id."""
    if scores.numel() == 0:
        return scores
    peak = torch.full((num_segments,), -math.inf, dtype=scores.dtype)
    peak = peak.scatter_reduce(0, segment, scores.detach(), reduce="amax", include_self=True)
    exp = torch.exp(scores - peak[segment])
    total = torch.zeros(num_segments, dtype=scores.dtype).index_add(0, segment, exp)
    return exp / total[segment]


def uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    """In-place uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draw from `generator`."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        sample = torch.rand(tensor.shape, generator=generator, dtype=DTYPE)
        tensor.copy_(sample * 2.0 * bound - bound)
    return tensor
