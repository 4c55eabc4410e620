"""External speech recognizer bridge (one subprocess per utterance)."""

from __future__ import annotations

import io
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

from ..errors import ProcessFailure, RecognizerTimeout
from ..signal import Waveform, save_wav
from .metrics import tokenize


@dataclass(frozen=True)
class CommandSpec:
    """``argv`` may contain ``{wav}``; without it the WAV bytes go to standard input."""

    argv: tuple[str, ...]
    timeout: float = 60.0

    @classmethod
    def parse(cls, command: Union[str, Sequence[str]], timeout: float = 60.0) -> "CommandSpec":
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ValueError("empty recognizer command")
        return cls(tuple(argv), float(timeout))

    @property
    def uses_file(self) -> bool:
        return any("{wav}" in a for a in self.argv)


def _wav_bytes(w: Waveform) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "utt.wav"
        save_wav(w, path)
        return path.read_bytes()


def recognizer_bridge(w: Waveform, spec: CommandSpec) -> tuple[str, ...]:
    """Run the command on ``w`` and return the normalized words of its standard output."""
    with tempfile.TemporaryDirectory() as tmp:
        stdin = None
        argv = list(spec.argv)
        if spec.uses_file:
            path = Path(tmp) / "utt.wav"
            save_wav(w, path)
            argv = [a.replace("{wav}", str(path)) for a in argv]
        else:
            stdin = _wav_bytes(w)
        try:
            proc = subprocess.run(argv, input=stdin, capture_output=True, timeout=spec.timeout)
        except subprocess.TimeoutExpired as exc:
            # subprocess.run kills and reaps the child before re-raising
            raise RecognizerTimeout(f"recognizer exceeded {spec.timeout} s") from exc
        except OSError as exc:
            raise ProcessFailure(f"cannot start recognizer: {exc}", "") from exc
    stderr = proc.stderr.decode("utf-8", errors="replace")
    if proc.returncode != 0:
        raise ProcessFailure(f"recognizer exited with status {proc.returncode}", stderr)
    return tokenize(proc.stdout.decode("utf-8", errors="replace"))
