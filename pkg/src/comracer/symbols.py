"""Default tags for well-known Windows synchronization and heap routines.

Fixtures name their imports with ``.sym``; any name listed here is tagged
automatically unless the fixture or a config file says otherwise.  Only
routines that take their object in ``rcx`` (or return it in ``rax``) are
listed, since that is where the analysis looks.
"""
from __future__ import annotations

from .isa import SymbolTag

_ACQUIRE = ("EnterCriticalSection", "AcquireSRWLockExclusive", "AcquireSRWLockShared",
            "WaitForSingleObject", "WaitForSingleObjectEx")
_RELEASE = ("LeaveCriticalSection", "ReleaseSRWLockExclusive", "ReleaseSRWLockShared",
            "ReleaseMutex")
_FREE = ("??3@YAXPEAX@Z", "??3@YAXPEAX_K@Z", "??_V@YAXPEAX@Z", "free", "CoTaskMemFree",
         "LocalFree", "SysFreeString")
_ALLOC = ("??2@YAPEAX_K@Z", "??_U@YAPEAX_K@Z", "malloc", "CoTaskMemAlloc", "LocalAlloc",
          "SysAllocString", "HeapAlloc")

DEFAULT_TAGS: dict[str, SymbolTag] = {
    **{name: SymbolTag.LOCK_ACQUIRE for name in _ACQUIRE},
    **{name: SymbolTag.LOCK_RELEASE for name in _RELEASE},
    **{name: SymbolTag.FREE for name in _FREE},
    **{name: SymbolTag.ALLOC for name in _ALLOC},
}
