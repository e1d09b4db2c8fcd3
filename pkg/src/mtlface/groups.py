"""The seven age groups: 10-, 11-20, 21-30, 31-40, 41-50, 51-60, 61+."""
import math

# inclusive bounds; None marks the open-ended last group
AGE_GROUPS = ((0, 10), (11, 20), (21, 30), (31, 40), (41, 50), (51, 60), (61, None))
N_GROUPS = len(AGE_GROUPS)

# interval midpoints; 61+ has no upper end and uses 65
REPRESENTATIVE_AGES = (5.0, 15.5, 25.5, 35.5, 45.5, 55.5, 65.0)


def age_to_group(age: float) -> int:
    """Group index of an age in years.

    Fractional ages fall in the group whose upper bound they do not exceed,
    i.e. (10, 20] is group 1.
    """
    age = float(age)
    if not age >= 0:
        raise ValueError(f"age must be non-negative, got {age}")
    if age <= 10:
        return 0
    return min(int(math.ceil((age - 10) / 10)), N_GROUPS - 1)


def representative_age(group: int) -> float:
    if not 0 <= group < N_GROUPS:
        raise ValueError(f"group {group} out of range [0, {N_GROUPS})")
    return REPRESENTATIVE_AGES[group]


def in_group(age: float, group: int) -> bool:
    return age_to_group(age) == group
