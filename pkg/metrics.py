from prometheus_client import Counter, Histogram

TRAIN_STEPS = Counter("vertexdet_train_steps_total", "Number of optimizer steps", ["rpe_mode"])
STAGE_LATENCY = Histogram("vertexdet_stage_latency_seconds", "Latency of pipeline stages", ["stage"])
CHECK_FAILURES = Counter("vertexdet_check_failures_total", "Failed invariant checks", ["suite"])
