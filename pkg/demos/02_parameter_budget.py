"""Matching the FFN parameter budget with a smaller SwishRNN inner size.

A SwishRNN block holds three d x d' matrices, an FFN block two d x d_ffn
ones, so parity means d' = 2 d_ffn / 3.
"""

from swishbert.model import ModelConfig, block_matrix_params, count_params, solve_inner_dim

rows = [("desk", 128, 512, 2, 2), ("base", 768, 3072, 12, 12), ("large", 1024, 4096, 16, 24)]
print(f"{'size':<6} {'d':>5} {'d_ffn':>6} {'d_prime':>8} {'ffn block':>12} {'swish block':>12} {'diff':>7}")
for name, d, d_ffn, heads, layers in rows:
    dp = solve_inner_dim(d, d_ffn, 64 if name == "large" else 1)
    kw = dict(d=d, heads=heads, head_dim=d // heads, num_layers=layers)
    ffn = ModelConfig(variant="rab", d_ffn=d_ffn, **kw)
    sw = ModelConfig(variant="swish", d_prime=dp, **kw)
    a, b = block_matrix_params(ffn), block_matrix_params(sw)
    print(f"{name:<6} {d:>5} {d_ffn:>6} {dp:>8} {a:>12,} {b:>12,} {(b - a) / a:>7.2%}")

# A common large setting uses d'=2752, rounding up instead of down to 2688.
big = block_matrix_params(ModelConfig(variant="swish", d=1024, heads=16, head_dim=64, d_prime=2752))
print(f"\nlarge with d'=2752: {big:,} matrix entries, {(big - 2 * 1024 * 4096) / (2 * 1024 * 4096):+.2%} vs FFN")

desk = ModelConfig()
print(f"desk swish model, all parameters: {count_params(desk):,}")
print(f"desk rab model, all parameters:   {count_params(ModelConfig(variant='rab')):,}")
