MESSAGES = {
    # CLI progress
    "estimate_start": "Estimating {n_params} blip parameters on {n_groups} sampling groups...",
    "estimate_done": "Estimation finished; report written to {path}",
    "simulate_start": "Running {replicates} Monte Carlo replicates of '{dgp}'...",
    "simulate_done": "Simulation finished; report written to {path}",
    "validate_ok": "Panel and structure look valid.",
    "validate_failed": "Validation found {n_errors} error(s).",
    "synth_done": "Synthetic county data written to {path}",
    # Warnings
    "warn_mc_failures": "{failed} of {replicates} Monte Carlo replicates failed and were dropped.",
}

REPORT_HEADERS = {
    "psi": ("label", "estimate", "se", "ci_low", "ci_high"),
    "estimands": ("name", "estimate", "se", "ci_low", "ci_high", "method"),
    "montecarlo": ("estimand", "truth", "mean", "sd", "mean_se", "coverage", "replicates"),
}


def blip_cell_label(m: int, k: int, history: tuple[tuple[float, tuple[float, ...]], ...]) -> str:
    """Row label for gamma_{m,k} at a history point, e.g. gamma_{0,1}(a_0=1,h_0=0)."""
    if m == 0:
        a, h = history[0]
        return f"gamma_{{{m},{k}}}(a_0={a:g},h_0={h[0]:g})"
    a_bar = ",".join(f"{a:g}" for a, _ in history)
    h_bar = ",".join(f"{h[0]:g}" for _, h in history)
    return f"gamma_{{{m},{k}}}(a_bar=({a_bar}),h_bar=({h_bar}))"


def psi_component_label(r: int, m: int, k: int) -> str:
    """Row label for a cluster-model coefficient, e.g. psi^1_{0,1}."""
    return f"psi^{r}_{{{m},{k}}}"


UNTREATED_LABEL = "E[Y_{k}(0)]"
NAIVE_SUFFIX = " (no interference)"
