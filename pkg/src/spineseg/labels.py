"""Class-id table for the 19 spine structures plus background."""

# Report order: sacrum, lumbar and thoracic vertebral bodies top-down,
# then the discs between them.  Index in this list == label id - 1.
VERTEBRA_NAMES = ["S", "L5", "L4", "L3", "L2", "L1", "T12", "T11", "T10", "T9"]
DISC_NAMES = [
    "L5/S", "L4/L5", "L3/L4", "L2/L3", "L1/L2",
    "T12/L1", "T11/T12", "T10/T11", "T9/T10",
]
STRUCTURE_NAMES = VERTEBRA_NAMES + DISC_NAMES


def structure_names(num_classes: int) -> list[str]:
    """Foreground class names for a label set of ``num_classes`` (incl. background).

    The 20-class spine layout gets its anatomical names; any other class count
    (synthetic data, reduced configs) falls back to generic names.
    """
    if num_classes == len(STRUCTURE_NAMES) + 1:
        return list(STRUCTURE_NAMES)
    return [f"class_{i}" for i in range(1, num_classes)]
