from __future__ import annotations
import math
import re
from typing import Sequence

from dyadic_flow_tents.boundary_sht import check_delta_conditions, minimal_stride
from dyadic_flow_tents.exceptions import ConfigurationError


class BaseValidator:
    """Precondition gate for a queued check.

    Validators never raise: ``validate(job)`` returns ``(True, info)`` or
    ``(False, {"error": ...})``. A validator only looks at jobs whose name matches
    ``name_pattern``; other jobs pass untouched.
    """

    def __init__(self, name_pattern: str = None):
        self.name_pattern = re.compile(name_pattern) if name_pattern else None

    def applies_to(self, job) -> bool:
        return self.name_pattern is None or bool(self.name_pattern.search(job.name))

    def validate_common(self, job) -> (bool, dict):
        if job.domain is None:
            return False, {"error": f"Check '{job.name}' has no domain."}
        return True, {"check": job.name}

    def check(self, job) -> (bool, dict):
        return True, {}

    def validate(self, job) -> (bool, dict):
        if not self.applies_to(job):
            return True, {}
        valid, info = self.validate_common(job)
        if not valid:
            return False, info
        valid, extra = self.check(job)
        if not valid:
            return False, extra
        info.update(extra)
        return True, info


class DeltaConditionValidator(BaseValidator):
    def __init__(self, name_pattern: str = None, kappa: float = None, c_omega: float = None):
        """
        Args:
            kappa (float): quasi-triangle constant for condition (a); taken as 1 when unknown.
            c_omega (float): distance comparability constant; enables condition (b).

        A job whose stride is None is coarsened to the smallest admissible stride.
        """
        super().__init__(name_pattern)
        self.kappa = kappa
        self.c_omega = c_omega

    def check(self, job) -> (bool, dict):
        if "delta" not in job.params:
            return True, {}
        kappa = job.params.get("kappa", self.kappa)
        c_omega = job.params.get("c_omega", self.c_omega) or job.domain.c_omega
        stride = job.params.get("stride", 1)
        try:
            if stride is None:
                stride = minimal_stride(job.params["delta"], kappa, c_omega)
            delta = job.params["delta"] ** stride
            check_delta_conditions(delta, kappa, c_omega)
        except ConfigurationError as exc:
            return False, {"error": str(exc), "condition": exc.condition}
        return True, {"delta_effective": delta, "stride": stride}


class DepthValidator(BaseValidator):
    def __init__(self, name_pattern: str = None, depth_min: int = 1, depth_max: int = None):
        super().__init__(name_pattern)
        self.depth_min = depth_min
        self.depth_max = depth_max

    def check(self, job) -> (bool, dict):
        depth = job.params.get("depth")
        if depth is None:
            return True, {}
        if depth < self.depth_min:
            return False, {"error": f"Depth {depth} is less than minimum allowed {self.depth_min}."}
        if self.depth_max is not None and depth > self.depth_max:
            return False, {"error": f"Depth {depth} is greater than maximum allowed {self.depth_max}."}
        return True, {"depth": depth}


class SampleCountValidator(BaseValidator):
    def __init__(self, name_pattern: str = None, key: str = "samples", minimum: int = 1):
        super().__init__(name_pattern)
        self.key = key
        self.minimum = minimum

    def check(self, job) -> (bool, dict):
        count = job.params.get(self.key)
        if count is None:
            return True, {}
        if count < self.minimum:
            return False, {"error": f"{self.key} {count} is less than minimum allowed {self.minimum}."}
        return True, {self.key: count}


class ScaleValidator(BaseValidator):
    """Scales must lie in (0, nbhd_width / 2]."""

    def __init__(self, name_pattern: str = None, key: str = "eps"):
        super().__init__(name_pattern)
        self.key = key

    def check(self, job) -> (bool, dict):
        scales = job.params.get(self.key)
        if scales is None:
            return True, {}
        top = job.domain.nbhd_width / 2
        bad = [e for e in _as_list(scales) if not 0 < e <= top]
        if bad:
            return False, {"error": f"Scales {bad} fall outside (0, {top}]."}
        return True, {}


class ExponentValidator(BaseValidator):
    """Lebesgue exponents p > 1 and finite weight exponents."""

    def check(self, job) -> (bool, dict):
        p = job.params.get("p")
        if p is not None and not all(q > 1 for q in _as_list(p)):
            return False, {"error": f"Exponent p={p} must exceed 1."}
        alphas = job.params.get("alphas")
        if alphas is not None and not all(math.isfinite(a) for a in _as_list(alphas)):
            return False, {"error": f"Weight exponents {alphas} must be finite."}
        return True, {}


def _as_list(values) -> Sequence[float]:
    if isinstance(values, (int, float)):
        return [values]
    return list(values)


class CompositeValidator:
    def __init__(self, validators: list):
        """
        Args:
            validators (list): validator instances, each with a validate(job) method
                returning (bool, dict).
        """
        self.validators = validators

    def validate(self, job) -> (bool, dict):
        """
        Applies all validators in order.

        Returns:
            (bool, dict): True and merged info if all validators pass,
                          False and error info of the first failure otherwise.
        """
        combined_info = {}
        for validator in self.validators:
            valid, info = validator.validate(job)
            if not valid:
                return False, info
            combined_info.update(info)
        return True, combined_info
