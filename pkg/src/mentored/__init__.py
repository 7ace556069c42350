"""Mentored problem-solving pipeline.

A student policy solves multi-step tool-use tasks; a judge locates the
earliest wrong step of each failed run; a teacher rewrites that one
step and the student resumes from the repaired prefix. Solved runs
become masked supervised data, preference pairs, and rollout seeds.

A companion simulator measures how imitation error compounds with
horizon on small adversarial decision processes and how the variance
of truncated policy gradients shrinks as the resume point moves later.
"""

from __future__ import annotations

__version__ = "0.1.0"
