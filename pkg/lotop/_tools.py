import time
from typing import Dict, Optional


class StallMonitor:
    """Detects a stalled minimization after N consecutive non-improving energies.

    The Levenberg-Marquardt loop submits the energy of every trial step. A trial is
    *bad* when it does not decrease the best energy seen so far by more than
    ``min_delta``. Once ``patience`` bad trials follow each other, `should_stop`
    returns `True`; a single good trial resets the counter.

    .. testcode::

        monitor = lotop.StallMonitor(2, min_delta=0.0)
        monitor.update(10.0)  # the number of bad updates: 0
        monitor.update(11.0)  # the number of bad updates: 1
        assert not monitor.should_stop()
        monitor.update(10.0)  # the number of bad updates: 2
        assert monitor.should_stop()
        monitor.update(9.0)  # the number of bad updates: 0
        assert not monitor.should_stop()
        assert monitor.best == 9.0
    """

    def __init__(self, patience: int, *, min_delta: float = 0.0) -> None:
        """Initialize self.

        Args:
            patience: the number of consecutive bad updates that stops the loop.
            min_delta: a new energy must be lower than the best one by more than
                ``min_delta`` to count as an improvement.
        Raises:
            ValueError: in case of invalid arguments.
        """
        if patience < 1:
            raise ValueError(
                f'patience must be a positive number (the provided value: {patience}).'
            )
        if min_delta < 0.0:
            raise ValueError(
                'min_delta must be a non-negative number'
                f' (the provided value: {min_delta}).'
            )
        self._patience = patience
        self._min_delta = min_delta
        self._best: Optional[float] = None
        self._n_consecutive_bad_updates = 0

    @property
    def best(self) -> Optional[float]:
        """The lowest energy submitted so far (`None` right after creation/reset)."""
        return self._best

    def reset(self) -> None:
        """Forget both the best energy and the counter of bad updates."""
        self._best = None
        self._n_consecutive_bad_updates = 0

    def should_stop(self) -> bool:
        """Check whether the number of consecutive bad updates reached the patience."""
        return self._n_consecutive_bad_updates >= self._patience

    def update(self, value: float) -> bool:
        """Submit a new energy.

        Args:
            value: the energy of the latest trial.
        Returns:
            `True` if the update improved the best energy.
        """
        success = self._best is None or value < self._best - self._min_delta
        if success:
            self._best = value
            self._n_consecutive_bad_updates = 0
        else:
            self._n_consecutive_bad_updates += 1
        return success


class Timer:
    """Sums up the wall-clock seconds spent inside ``with`` blocks.

    Every ``with`` block adds its duration (`time.perf_counter`), so one timer can
    collect a stage that runs in several pieces. Calling the timer returns the total,
    including the block that is still running.

    .. testcode::

        import time

        timer = lotop.Timer()
        assert timer() == 0.0
        with timer:
            time.sleep(0.01)
        first = timer()
        assert first > 0.0
        time.sleep(0.01)
        assert timer() == first
        with timer:
            pass
        assert timer() >= first
    """

    def __init__(self) -> None:
        self._total = 0.0
        self._entered: Optional[float] = None

    def __call__(self) -> float:
        if self._entered is None:
            return self._total
        return self._total + time.perf_counter() - self._entered

    def __enter__(self) -> 'Timer':
        if self._entered is not None:
            raise RuntimeError('the timer is already running')
        self._entered = time.perf_counter()
        return self

    def __exit__(self, *args) -> bool:  # type: ignore
        assert self._entered is not None
        self._total += time.perf_counter() - self._entered
        self._entered = None
        return False


def format_timings(timings: Dict[str, float]) -> str:
    return ', '.join(f'{stage}={seconds:.3f}s' for stage, seconds in timings.items())
