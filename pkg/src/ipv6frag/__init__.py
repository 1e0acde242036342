"""Overlapping IPv6 fragment test suite: packet crafting, a reassembly
oracle, campaign runner and compliance reporting."""

from .models import FragmentSpec, Mode, OverlapModel, TestCase, build_campaign, new_model, shankar_paxson_model
from .reassembly import Policy, ReassemblyOutcome, Status, expected_outcomes, fingerprint_policy

__version__ = "0.1.0"

__all__ = [
    "FragmentSpec", "Mode", "OverlapModel", "TestCase", "build_campaign", "new_model", "shankar_paxson_model",
    "Policy", "ReassemblyOutcome", "Status", "expected_outcomes", "fingerprint_policy",
]
