"""Desk-scale constrained example problems with reference data.

Every builder is deterministic given its seed, returns a
:class:`GalleryExample` bundling the problem, oracle data for independent
verification, and (where one exists) a known feasible point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..problem import ProblemDefinition

__all__ = ["GalleryExample", "REGISTRY", "build_odl", "build_attack",
           "build_topology", "build_procrustes", "build_pde"]


@dataclass
class GalleryExample:
    name: str
    problem: ProblemDefinition
    oracle: dict
    feasible_point: dict | None
    config: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RegistryEntry:
    description: str
    defaults: dict
    build: callable


from .odl import build_odl                    # noqa: E402
from .attack import build_attack              # noqa: E402
from .topology import build_topology          # noqa: E402
from .procrustes import build_procrustes      # noqa: E402
from .pde import build_pde                    # noqa: E402
from . import odl, attack, topology, procrustes, pde  # noqa: E402

REGISTRY: dict[str, RegistryEntry] = {
    "odl": RegistryEntry(odl.DESCRIPTION, odl.DEFAULTS, odl.from_config),
    "attack": RegistryEntry(attack.DESCRIPTION, attack.DEFAULTS,
                            attack.from_config),
    "topology": RegistryEntry(topology.DESCRIPTION, topology.DEFAULTS,
                              topology.from_config),
    "procrustes": RegistryEntry(procrustes.DESCRIPTION, procrustes.DEFAULTS,
                                procrustes.from_config),
    "pde": RegistryEntry(pde.DESCRIPTION, pde.DEFAULTS, pde.from_config),
}
