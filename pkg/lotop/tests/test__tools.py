from time import perf_counter, sleep

import pytest

import lotop
from lotop._tools import format_timings


def test_stall_monitor():
    with pytest.raises(ValueError):
        lotop.StallMonitor(0)
    with pytest.raises(ValueError):
        lotop.StallMonitor(1, min_delta=-1.0)

    monitor = lotop.StallMonitor(1)
    assert monitor.best is None
    assert monitor.update(1.0)
    assert not monitor.should_stop()
    assert not monitor.update(1.0)
    assert monitor.should_stop()

    monitor.reset()
    assert monitor.best is None
    monitor.update(1.0)
    assert not monitor.should_stop()

    monitor = lotop.StallMonitor(2)
    monitor.update(0.0)
    monitor.update(1.0)
    assert not monitor.should_stop()
    monitor.update(1.0)
    assert monitor.should_stop()
    monitor.update(-1.0)
    assert not monitor.should_stop()
    assert monitor.best == -1.0

    monitor = lotop.StallMonitor(1, min_delta=0.1)
    monitor.update(0.0)
    monitor.update(-0.05)
    assert monitor.should_stop()
    assert monitor.best == 0.0
    monitor.update(-0.2)
    assert not monitor.should_stop()


def test_stall_monitor_infinite_energies():
    monitor = lotop.StallMonitor(2)
    monitor.update(1.0)
    monitor.update(float('inf'))
    monitor.update(float('inf'))
    assert monitor.should_stop()


def test_timer():
    timer = lotop.Timer()
    sleep(0.001)
    assert timer() == 0.0

    with timer as entered:
        assert entered is timer
        sleep(0.001)
        assert timer() > 0.0
        with pytest.raises(RuntimeError):
            with timer:
                pass
    first = timer()
    sleep(0.001)
    assert timer() == first

    with timer:
        sleep(0.01)
    assert timer() > first + 0.005


def test_timer_measurements():
    x = perf_counter()
    with lotop.Timer() as timer:
        sleep(0.1)
    correct = perf_counter() - x
    assert timer() == pytest.approx(correct, abs=0.01)


def test_timer_stops_on_errors():
    timer = lotop.Timer()
    with pytest.raises(ValueError):
        with timer:
            raise ValueError
    elapsed = timer()
    sleep(0.001)
    assert timer() == elapsed


def test_format_timings():
    assert format_timings({}) == ''
    assert format_timings({'load': 0.5, 'register': 2.0}) == (
        'load=0.500s, register=2.000s'
    )
