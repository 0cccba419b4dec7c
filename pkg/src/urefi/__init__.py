"""Fault injection for DNN accelerators modeled as uniform recurrence equations."""

from __future__ import annotations

__version__ = "0.1.0"

from .array import ConfigError, SystolicConfig, cycle_count, pe_grid
from .campaign import (
    CampaignOptions,
    CampaignReport,
    Histogram,
    MetricError,
    faulty_distance,
    fit_accelerator,
    histogram_afd,
    run_campaign,
    sdc1,
    sdc_confidence_drop,
    sdc_topk,
)
from .faults import (
    Fault,
    FaultError,
    FaultListSpec,
    FaultScope,
    expand_fault,
    generate_fault_list,
    parse_fault,
    read_fault_list,
    sample_size,
    write_fault_list,
)
from .lattice import (
    OUTPUT_STATIONARY,
    WEIGHT_STATIONARY,
    LatticeDomain,
    LatticePoint,
    Line,
    Projection,
    displacement,
    validate_projection,
)
from .lolif import ConvShape, lift, lower_activation, lower_weights, tiled_matmul
from .numerics import (
    F32,
    INT8,
    INT16,
    INT32,
    NumberFormat,
    QuantTensor,
    apply_bit_fault,
    load_tensor,
    quantize,
    save_tensor,
    wrap,
)
from .runtime import (
    ExecutionPlan,
    Layer,
    ModelError,
    NetworkModel,
    infer_hierarchical,
    infer_reference,
    load_inputs,
    load_model,
    save_model,
)
from .systolic import simulate_matmul, simulate_matmul_wavefront
