"""EarlyLate staggered-start schedule and image-iteration cost accounting.

Per-class images are split into ``M`` sub-batches. Sub-batch ``b`` joins the
shared optimization loop at iteration ``b * RI`` and trains until the loop
ends at ``MI``, i.e. for ``MI - b * RI`` iterations.

When ``ipc`` is not a multiple of ``M`` the first ``ipc % M`` sub-batches
take one extra image, so the longest-trained sub-batches are never smaller
than the later ones.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import ConfigError, RecoveryConfig


class ScheduleError(ConfigError):
    pass


@dataclass(frozen=True)
class ScheduleEntry:
    index: int
    start: int
    length: int
    size: int  # images per class in this sub-batch
    first_slot: int  # first ipc index belonging to the sub-batch

    @property
    def slots(self) -> range:
        return range(self.first_slot, self.first_slot + self.size)

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class EarlyLateSchedule:
    ipc: int
    num_subbatches: int
    max_iterations: int
    round_iterations: int
    entries: tuple[ScheduleEntry, ...]

    @property
    def subbatch_size(self) -> int:
        """Nominal images per sub-batch (exact when ``ipc % M == 0``)."""
        return self.ipc // self.num_subbatches

    def subbatch_of(self, ipc_index: int) -> int:
        for e in self.entries:
            if ipc_index in e.slots:
                return e.index
        raise IndexError(f"ipc index {ipc_index} out of range [0, {self.ipc})")

    def iterations_for(self, ipc_index: int) -> int:
        return self.entries[self.subbatch_of(ipc_index)].length


def subbatch_sizes(ipc: int, num_subbatches: int) -> list[int]:
    q, r = divmod(ipc, num_subbatches)
    return [q + (1 if b < r else 0) for b in range(num_subbatches)]


def make_schedule(ipc: int, num_subbatches: int, max_iterations: int, round_iterations: int) -> EarlyLateSchedule:
    M, MI, RI = num_subbatches, max_iterations, round_iterations
    if ipc < 1 or M < 1:
        raise ScheduleError("ipc and num_subbatches must be >= 1")
    if M > ipc:
        raise ScheduleError(f"num_subbatches ({M}) exceeds ipc ({ipc})")
    if RI < 0 or MI < 1:
        raise ScheduleError("max_iterations must be >= 1 and round_iterations >= 0")
    if MI - (M - 1) * RI < 1:
        raise ScheduleError("last sub-batch has no iterations")
    entries = []
    first = 0
    for b, size in enumerate(subbatch_sizes(ipc, M)):
        entries.append(ScheduleEntry(b, b * RI, MI - b * RI, size, first))
        first += size
    return EarlyLateSchedule(ipc, M, MI, RI, tuple(entries))


def schedule_for(config: RecoveryConfig) -> EarlyLateSchedule:
    return make_schedule(config.ipc, config.num_subbatches, config.max_iterations, config.round_iterations)


def active_subbatches(schedule: EarlyLateSchedule, t: int) -> frozenset[int]:
    if not 0 <= t < schedule.max_iterations:
        raise ScheduleError(f"iteration {t} out of range [0, {schedule.max_iterations})")
    return frozenset(e.index for e in schedule.entries if e.start <= t)


def _weighted_start_sum(ipc: int, M: int) -> int:
    # sum_b b * size_b with sizes q+1 for b < r, q otherwise
    q, r = divmod(ipc, M)
    return q * M * (M - 1) // 2 + r * (r - 1) // 2


def total_image_iterations(schedule: EarlyLateSchedule) -> int:
    """Per-class image-iterations, ``sum_b size_b * (MI - b * RI)``, in closed form.

    For an even split this is ``ipc*MI - k*RI*M(M-1)/2``; with ``k = 1`` it is
    the per-sub-batch count ``M*MI - RI*M(M-1)/2``.
    """
    s = schedule
    return s.ipc * s.max_iterations - s.round_iterations * _weighted_start_sum(s.ipc, s.num_subbatches)


def savings_ratio(schedule: EarlyLateSchedule) -> float:
    """Fraction of image-iterations saved relative to training every image for ``MI``."""
    s = schedule
    return s.round_iterations * _weighted_start_sum(s.ipc, s.num_subbatches) / (s.ipc * s.max_iterations)
