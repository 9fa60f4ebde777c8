"""Smoke test for the Python bindings.

Uses an installed `idemlock` module if there is one, otherwise the library built by
`cargo build --release -p idemlock-python --features extension-module`.
"""

import os
import shutil
import sys
import tempfile
import threading


def load():
    try:
        import idemlock

        return idemlock
    except ImportError:
        pass
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for profile in ("release", "debug"):
        lib = os.path.join(root, "target", profile, "libidemlock_py.so")
        if os.path.exists(lib):
            d = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(d, "idemlock.so"))
            sys.path.insert(0, d)
            import idemlock

            return idemlock
    sys.exit("idemlock extension not found; build it first")


def main():
    il = load()

    for structure in ("dlist", "lazylist", "leaftree", "hashtable"):
        s = il.ConcurrentSet(structure, "try")
        assert s.insert(5, 50) and not s.insert(5, 51)
        assert s.find(5) == 50 and 5 in s and len(s) == 1
        assert s.remove(5) and s.find(5) is None
        assert s.validate() == []

    # Threads race on one lock; every increment happens exactly once.
    lock, cell = il.Lock(), il.Cell(0)

    def bump():
        cell.store(cell.load() + 1)
        return True

    def worker():
        for _ in range(200):
            il.strict_lock(lock, bump)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cell.peek() == 800, cell.peek()
    assert not lock.is_locked()

    il.set_lock_mode("blocking")
    assert il.lock_mode() == "blocking"
    assert il.try_lock(lock, bump) and cell.peek() == 801
    il.set_lock_mode("lockfree")

    r = il.run_workload(structure="leaftree", range=1000, threads=2, seconds=0.1, alpha=0.75)
    assert r["ops"] > 0 and r["inserted"] - r["removed"] == r["size_after"] - r["size_before"], r

    ok, report = il.verify("trylock", case="frozen-owner")
    assert ok, report
    ok, report = il.verify("idempotence", case="counter/2")
    assert ok, report

    print("python smoke test passed")


if __name__ == "__main__":
    main()
