"""Evaluation harness: metrics, probe recognizer, attack simulation, experiments."""
