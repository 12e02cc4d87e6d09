import math
from typing import Sequence

from regional_adv.attack import AttackOutcome
from regional_adv.experiment import POOLED_FAMILY, CellAggregate
from regional_adv.norms import NormTriple


def format_norm_triple(norms: NormTriple) -> str:
    return f"L0={norms.l0:.4f} L2={norms.l2:.4f} Linf={norms.linf:.4f}"


def format_outcome(outcome: AttackOutcome, true_label: int | None = None) -> str:
    output = []

    if true_label is not None:
        output.append(f"True label: {true_label}")
    output.append(f"Target class: {outcome.target_class}")
    output.append(f"Predicted class: {outcome.predicted_class}")
    output.append(f"Source success: {'yes' if outcome.source_success else 'no'}")
    output.append(f"Iterations: {outcome.iterations_used}")
    output.append(f"Norms: {format_norm_triple(outcome.norms)}")

    return "\n".join(output)


def format_transfer_matrix(
    aggregates: Sequence[CellAggregate], fraction: float, family: str = POOLED_FAMILY
) -> str:
    """Source rows by target columns of transfer rates, as percentages."""
    cells = {
        (a.source, a.target): a
        for a in aggregates
        if a.family == family and a.fraction == fraction
    }
    sources = sorted({source for source, _ in cells})
    targets = sorted({target for _, target in cells})
    if not cells:
        return f"No {family} cells at fraction {fraction:g}"

    width = max(len(name) for name in [*sources, *targets, "source \\ target"])
    output = [f"{family} transfer rates, fraction {fraction:g}"]
    output.append(
        " ".join(["source \\ target".ljust(width), *(t.rjust(width) for t in targets)])
    )

    for source in sources:
        row = [source.ljust(width)]
        for target in targets:
            cell = cells.get((source, target))
            if cell is None or math.isnan(cell.transfer_rate):
                row.append("-".rjust(width))
            else:
                text = f"{100 * cell.transfer_rate:.1f}% (n={cell.n})"
                row.append(text.rjust(width))
        output.append(" ".join(row))

    return "\n".join(output)
