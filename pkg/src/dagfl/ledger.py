"""Integer token ledger with escrow accounts, a burn pool and emission tracking.

Conservation: sum(balances) + sum(escrow) + burned - minted == initial_supply.
"""

from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, field

from .crypto import UserId


class LedgerError(Exception):
    pass


class InsufficientBalance(LedgerError):
    pass


@dataclass
class Ledger:
    balances: dict[UserId, int] = field(default_factory=dict)
    escrow: dict[str, int] = field(default_factory=dict)
    burned: int = 0
    minted: int = 0
    initial_supply: int = 0
    # reward income (reference rewards and prizes, net of revocations) and fines paid
    rewards: dict[UserId, int] = field(default_factory=lambda: defaultdict(int))
    penalties: dict[UserId, int] = field(default_factory=lambda: defaultdict(int))
    unrecovered: int = 0

    @classmethod
    def genesis(cls, users, amount: int) -> "Ledger":
        ledger = cls()
        for u in users:
            ledger.balances[u] = int(amount)
        ledger.initial_supply = int(amount) * len(ledger.balances)
        return ledger

    def copy(self) -> "Ledger":
        return copy.deepcopy(self)

    def balance(self, user: UserId) -> int:
        return self.balances.get(user, 0)

    def add_user(self, user: UserId, amount: int = 0) -> None:
        if user not in self.balances:
            self.balances[user] = int(amount)
            self.initial_supply += int(amount)

    def _debit(self, user: UserId, amount: int) -> None:
        if amount < 0:
            raise LedgerError("negative amount")
        if self.balance(user) < amount:
            raise InsufficientBalance(f"{user.short} has {self.balance(user)}, needs {amount}")
        self.balances[user] -= amount

    def _credit(self, user: UserId, amount: int) -> None:
        if amount < 0:
            raise LedgerError("negative amount")
        self.balances[user] = self.balance(user) + amount

    def transfer(self, src: UserId, dst: UserId, amount: int) -> None:
        self._debit(src, amount)
        self._credit(dst, amount)

    def deposit(self, user: UserId, account: str, amount: int) -> None:
        self._debit(user, amount)
        self.escrow[account] = self.escrow.get(account, 0) + amount

    def release(self, account: str, user: UserId, amount: int) -> None:
        held = self.escrow.get(account, 0)
        if amount < 0 or amount > held:
            raise LedgerError(f"escrow {account} holds {held}, cannot release {amount}")
        self.escrow[account] = held - amount
        self._credit(user, amount)

    def burn_escrow(self, account: str, amount: int) -> None:
        held = self.escrow.get(account, 0)
        if amount < 0 or amount > held:
            raise LedgerError(f"escrow {account} holds {held}, cannot burn {amount}")
        self.escrow[account] = held - amount
        self.burned += amount

    def close_escrow(self, account: str) -> None:
        if self.escrow.get(account, 0):
            raise LedgerError(f"escrow {account} still holds {self.escrow[account]}")
        self.escrow.pop(account, None)

    def mint(self, user: UserId, amount: int) -> None:
        self._credit(user, amount)
        self.minted += amount

    def unmint(self, user: UserId, amount: int) -> int:
        """Claw back minted tokens; returns how much could actually be recovered."""
        taken = min(amount, self.balance(user))
        self.balances[user] = self.balance(user) - taken
        self.minted -= taken
        self.unrecovered += amount - taken
        return taken

    def seize(self, src: UserId, dst: UserId, amount: int) -> int:
        """Move up to ``amount`` from ``src`` to ``dst``; a penalty never drives a balance negative."""
        taken = min(amount, self.balance(src))
        self.balances[src] -= taken
        self._credit(dst, taken)
        return taken

    def total(self) -> int:
        return sum(self.balances.values()) + sum(self.escrow.values()) + self.burned - self.minted

    def conserved(self) -> bool:
        return self.total() == self.initial_supply and all(v >= 0 for v in self.balances.values())

    def snapshot(self) -> dict:
        return {
            "balances": {str(u.index): b for u, b in sorted(self.balances.items())},
            "escrow": dict(sorted(self.escrow.items())),
            "burned": self.burned,
            "minted": self.minted,
            "rewards": {str(u.index): v for u, v in sorted(self.rewards.items()) if v},
            "penalties": {str(u.index): v for u, v in sorted(self.penalties.items()) if v},
        }


class LedgerRegistry:
    """Global-DAG registration view: everyone is registered; a positive balance is required."""

    def __init__(self, ledger: Ledger):
        self.ledger = ledger

    def is_registered(self, user: UserId) -> bool:
        return user in self.ledger.balances

    def has_balance(self, user: UserId) -> bool:
        return self.ledger.balance(user) > 0
