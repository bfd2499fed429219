"""Multi-head attention on the tensor engine. Cross-attention takes an additive bias."""
import math
from typing import Optional, Tuple

from errors import ConfigError, ShapeError
from ml.tensor import ParameterStore, Tensor, linear, matmul, mul, reshape, softmax_rows, transpose


class MultiHeadAttention:

    def __init__(self, store: ParameterStore, prefix: str, d_model: int, heads: int):
        if d_model % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.wq, self.bq = store.weight(f"{prefix}.wq", d_model, d_model), store.bias(f"{prefix}.bq", d_model)
        self.wk, self.bk = store.weight(f"{prefix}.wk", d_model, d_model), store.bias(f"{prefix}.bk", d_model)
        self.wv, self.bv = store.weight(f"{prefix}.wv", d_model, d_model), store.bias(f"{prefix}.bv", d_model)
        self.wo, self.bo = store.weight(f"{prefix}.wo", d_model, d_model), store.bias(f"{prefix}.bo", d_model)

    def _split(self, x: Tensor) -> Tensor:
        # T x C -> heads x T x d_head
        return transpose(reshape(x, (x.shape[0], self.heads, self.d_head)), (1, 0, 2))

    def forward(self, queries: Tensor, keys: Tensor, values: Tensor,
                bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Returns (output K x C, attention weights heads x K x N)."""
        if queries.shape[-1] != self.d_model or keys.shape[-1] != self.d_model:
            raise ShapeError(
                f"attention width {self.d_model}: got queries {queries.shape}, keys {keys.shape}"
            )
        if keys.shape[0] != values.shape[0]:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} differ in length")
        k, n = queries.shape[0], keys.shape[0]
        if bias is not None:
            if bias.ndim != 3 or bias.shape[0] not in (1, self.heads) or bias.shape[1:] != (k, n):
                raise ShapeError(
                    f"bias {bias.shape} does not match {self.heads} heads x {k} queries x {n} keys"
                )

        q = self._split(linear(queries, self.wq, self.bq))
        kt = transpose(self._split(linear(keys, self.wk, self.bk)), (0, 2, 1))
        v = self._split(linear(values, self.wv, self.bv))

        logits = mul(matmul(q, kt), 1.0 / math.sqrt(self.d_head))
        weights = softmax_rows(logits, bias)
        mixed = transpose(matmul(weights, v), (1, 0, 2))
        out = linear(reshape(mixed, (k, self.d_model)), self.wo, self.bo)
        return out, weights


def cross_attention(attn: MultiHeadAttention, queries: Tensor, keys: Tensor, values: Tensor,
                    bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    return attn.forward(queries, keys, values, bias)


def self_attention(attn: MultiHeadAttention, queries: Tensor) -> Tensor:
    out, _ = attn.forward(queries, queries, queries)
    return out
