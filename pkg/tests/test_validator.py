# test_validator.py
import math

from dyadic_flow_tents.asynchronous.processor import CheckJob
from dyadic_flow_tents.asynchronous.validator import (
    BaseValidator,
    CompositeValidator,
    DeltaConditionValidator,
    DepthValidator,
    ExponentValidator,
    SampleCountValidator,
    ScaleValidator,
)
from dyadic_flow_tents.domain_model import DomainSpec

BALL = DomainSpec(kind="ball", n=2, nbhd_width=0.3)


def make_job(name="grid build", domain=BALL, **params):
    return CheckJob(name=name, run=lambda **_: True, params=params, domain=domain)


def test_job_without_domain():
    valid, info = BaseValidator().validate(make_job(domain=None))
    assert valid is False
    assert "has no domain" in info["error"]


def test_name_pattern_skips_other_checks():
    # Only "grid" jobs are looked at, so a missing domain elsewhere goes through.
    validator = BaseValidator(name_pattern=r"grid")
    valid, info = validator.validate(make_job(name="tents verify", domain=None))
    assert valid is True
    assert info == {}


def test_valid_delta():
    validator = DeltaConditionValidator(kappa=1.0, c_omega=1.0)
    valid, info = validator.validate(make_job(delta=0.5, stride=7))
    assert valid is True
    assert info["delta_effective"] == 0.5 ** 7


def test_delta_condition_a():
    validator = DeltaConditionValidator(kappa=1.0)
    valid, info = validator.validate(make_job(delta=0.125))
    assert valid is False
    assert info["condition"] == "(a)"
    assert "96*kappa^6*delta" in info["error"]


def test_delta_condition_b_uses_the_domain_constant():
    domain = BALL.with_c_omega(3.0)
    valid, info = DeltaConditionValidator().validate(make_job(domain=domain, delta=0.005))
    assert valid is False
    assert info["condition"] == "(b)"


def test_unknown_kappa_still_checks_condition_a():
    valid, info = DeltaConditionValidator().validate(make_job(delta=0.5))
    assert valid is False
    assert info["condition"] == "(a)"


def test_automatic_stride():
    valid, info = DeltaConditionValidator().validate(make_job(delta=0.5, stride=None))
    assert valid is True
    assert info["stride"] == 7
    assert info["delta_effective"] == 0.5 ** 7


def test_job_parameters_override_the_validator():
    validator = DeltaConditionValidator(kappa=2.0)
    valid, _ = validator.validate(make_job(delta=0.5, stride=7, kappa=1.0))
    assert valid is True


def test_depth_limits():
    validator = DepthValidator(depth_min=3, depth_max=8)
    valid, info = validator.validate(make_job(depth=2))
    assert valid is False
    assert "less than minimum" in info["error"]
    valid, info = validator.validate(make_job(depth=9))
    assert valid is False
    assert "greater than maximum" in info["error"]
    valid, info = validator.validate(make_job(depth=4))
    assert valid is True
    assert info["depth"] == 4


def test_sample_count():
    validator = SampleCountValidator(key="points", minimum=500)
    valid, info = validator.validate(make_job(points=100))
    assert valid is False
    assert info["error"] == "points 100 is less than minimum allowed 500."
    assert validator.validate(make_job(samples=10))[0] is True


def test_scales():
    validator = ScaleValidator()
    assert validator.validate(make_job(eps=[0.01, 0.15]))[0] is True
    valid, info = validator.validate(make_job(eps=[0.01, 0.2]))
    assert valid is False
    assert "fall outside" in info["error"]
    assert validator.validate(make_job(eps=0.0))[0] is False


def test_exponents():
    validator = ExponentValidator()
    assert validator.validate(make_job(p=[1.5, 2.0], alphas=[-0.5, 0.5]))[0] is True
    valid, info = validator.validate(make_job(p=1.0))
    assert valid is False
    assert "must exceed 1" in info["error"]
    valid, info = validator.validate(make_job(p=2.0, alphas=[0.1, math.inf]))
    assert valid is False
    assert "must be finite" in info["error"]


def test_composite_valid_job():
    composite = CompositeValidator(
        validators=[
            DepthValidator(name_pattern=r"grid", depth_min=3),
            SampleCountValidator(name_pattern=r"grid", key="points", minimum=500),
        ]
    )
    valid, info = composite.validate(make_job(depth=3, points=500))
    assert valid is True, f"Validation should pass, got info: {info}"
    assert info["depth"] == 3
    assert info["points"] == 500


def test_composite_reports_the_first_failure():
    composite = CompositeValidator(
        validators=[
            DepthValidator(depth_min=3),
            DeltaConditionValidator(kappa=1.0),
        ]
    )
    valid, info = composite.validate(make_job(depth=2, delta=0.125))
    assert valid is False
    assert "less than minimum" in info["error"]
    assert "condition" not in info
