#!/usr/bin/env python3
"""
Test Runner for the sgkit test suite

Runs all unit and integration tests and prints a summary.

Usage:
    python tests/test_runner.py
    python tests/test_runner.py --verbose
    python tests/test_runner.py --pattern "test_metrics.py"
"""

import argparse
import sys
import unittest
from pathlib import Path


def run_tests(verbose: bool = False, pattern: str = 'test_*.py'):
    """
    Discover and run tests under tests/

    Args:
        verbose: If True, print one line per test
        pattern: File pattern passed to unittest discovery

    Returns:
        tuple: (success: bool, results: TestResult)
    """
    tests_dir = Path(__file__).resolve().parent
    loader = unittest.TestLoader()
    suite = loader.discover(str(tests_dir), pattern=pattern, top_level_dir=str(tests_dir.parent))

    runner = unittest.TextTestRunner(verbosity=2 if verbose else 1, stream=sys.stdout)

    print("=" * 70)
    print("sgkit - Test Suite")
    print("=" * 70)
    print()

    result = runner.run(suite)

    print()
    print("=" * 70)
    print("Test Summary")
    print("=" * 70)
    print(f"Tests Run: {result.testsRun}")
    print(f"Successes: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print(f"Skipped: {len(result.skipped)}")
    print()

    if result.wasSuccessful():
        print("✓ ALL TESTS PASSED")
    else:
        print("✗ TESTS FAILED")
        print()
        if result.failures:
            print("Failed Tests:")
            for test, _ in result.failures:
                print(f"  - {test}")
        if result.errors:
            print("Test Errors:")
            for test, _ in result.errors:
                print(f"  - {test}")

    print()
    print("=" * 70)

    return result.wasSuccessful(), result


def main():
    """Main entry point"""
    parser = argparse.ArgumentParser(description="Run the sgkit test suite")
    parser.add_argument('--verbose', '-v', action='store_true', help='Per-test output')
    parser.add_argument('--pattern', default='test_*.py', help='Test file pattern')
    args = parser.parse_args()

    success, _ = run_tests(verbose=args.verbose, pattern=args.pattern)
    sys.exit(0 if success else 1)


if __name__ == '__main__':
    main()
