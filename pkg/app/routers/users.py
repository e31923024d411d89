from fastapi import APIRouter, Depends, HTTPException

from app.deps import get_monitor, verify_internal
from app.models import DecisionView, FlaggedUsers
from app.services.monitor import LiveMonitor, decision_name

router = APIRouter()


def _view(monitor: LiveMonitor, user_id: str) -> DecisionView:
    track = monitor.get(user_id)
    if track is None:
        return DecisionView(user_id=user_id)
    return DecisionView(
        user_id=user_id,
        steps=track.state.step,
        action_probs=None if track.probs is None else track.probs.tolist(),
        decision=decision_name(track),
    )


@router.get("/flagged", response_model=FlaggedUsers, summary="Users whose latest decision is attacker",
            dependencies=[Depends(verify_internal)])
async def flagged_users(monitor: LiveMonitor = Depends(get_monitor)):
    return FlaggedUsers(users=[_view(monitor, uid) for uid in monitor.flagged()])


@router.get("/{user_id}/decision", response_model=DecisionView, summary="Current detector decision for a user")
async def user_decision(user_id: str, monitor: LiveMonitor = Depends(get_monitor)):
    return _view(monitor, user_id)


@router.delete("/{user_id}", summary="Reset a user's detector state", dependencies=[Depends(verify_internal)])
async def reset_user(user_id: str, monitor: LiveMonitor = Depends(get_monitor)):
    if not monitor.reset(user_id):
        raise HTTPException(status_code=404, detail="User not tracked")
    return {"user_id": user_id, "reset": True}
