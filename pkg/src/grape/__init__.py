"""Group-representational positional encodings.

Multiplicative encodings rotate queries and keys with closed-form rank-2
exponentials (RoPE is the commuting special case); additive encodings act
through unipotent lifts (ALiBi and forget-gate biases are exact
instances); path-integral biases sum endpoint-dependent edge potentials.
"""
from . import _backend
from .additive import (ForgetGates, GateValues, JointScore, UnipotentLift, additive_score,
                       compute_gates, default_alibi_slopes, fox_bias, fox_bias_matrix, joint_score,
                       lift_k, lift_q, softplus, unipotent_matrix)
from .attention import (AttentionConfig, HeadEncoder, StreamingCache, attention_batch, logits_batch,
                        softmax_row, step_streaming)
from .multiplicative import (MultiSubspaceMap, ThinCompression, apply_2d, apply_3d, apply_ms,
                             log_uniform_thetas, noncommuting_spectrum, rope_reference)
from .path_integral import (PathBiasRow, ProbeStore, bias_row, edge_potential, endpoint_independent_row,
                            make_probes, path_product_check, phase_modulated_bias)
from .rank2 import (ExpCoefficients, PlaneGenerator, apply_exp, apply_exp_b_eq_Ja, dense_exp_oracle,
                    exp_coefficients, exp_derivatives, plane_scalars)
from .spectral import (PathFactorSeq, SpectrumReport, dictionary_closure_check, path_factor_spectrum,
                       path_product_report, rank2_spectrum, unipotent_report)

__version__ = "0.1.0"


def backend() -> str:
    """Name of the active kernel backend (``"cython"`` or ``"python"``)."""
    return _backend.name
