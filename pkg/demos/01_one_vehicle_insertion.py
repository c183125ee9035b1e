"""Walk through what happens when one pooled vehicle is offered a new trip.

A vehicle at the origin carries one passenger heading east. We insert a new
request lying to the north and look at what the insertion search reports:
the route it picks, the extra driving, the delay imposed on the onboard
passenger and the reward the dispatcher would book.
"""
from __future__ import annotations

from dataclasses import dataclass

from ridepool.config import SimConfig
from ridepool.objectives import compute_reward
from ridepool.routing import DROPOFF, Stop, best_insertion, plan_route


@dataclass(frozen=True)
class Request:
    id: int
    origin: tuple[float, float]
    dest: tuple[float, float]


def show(route) -> str:
    return " -> ".join(f"{s.kind[0].upper()}{s.order_id}@{s.eta:.0f}s" for s in route.stops)


def main() -> None:
    cfg = SimConfig()
    here = (0.0, 0.0)
    # passenger 1 is onboard and was promised a dropoff at t=150 s
    current = plan_route(here, 0.0, [Stop(DROPOFF, 1, (2.0, 0.0), deadline=150.0)], cfg.speed_kmh)
    print("current route:", show(current))

    for req in (Request(2, (1.0, 0.0), (2.0, 1.0)), Request(3, (0.0, 3.0), (0.0, 4.0))):
        ins = best_insertion(current, here, req, 0.0, cfg.speed_kmh)
        print(f"\nrequest {req.id}: {req.origin} -> {req.dest}")
        print("  new route:       ", show(ins.new_route))
        print(f"  extra driving:    {ins.added_vehicle_km:.2f} km")
        print(f"  onboard delay:    {ins.added_passenger_time:.0f} s, late dropoffs: {ins.late_count}")
        print(f"  reward booked:    {compute_reward(ins, req, cfg):.2f}")


if __name__ == "__main__":
    main()
