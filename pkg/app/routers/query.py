from typing import Optional

from fastapi import APIRouter, Depends, Header, HTTPException

from app.deps import get_context, user_header
from app.errors import InvalidNodeError
from app.models import DecisionView, QueryResponse, SubgraphView
from app.services.graph_core import ego_subgraph
from app.services.monitor import ServingContext, decision_name
from app.services.victim_model import predict

router = APIRouter()


@router.post("/{node_id}", response_model=QueryResponse, summary="Query the victim model for one node")
async def query_node(
    node_id: int,
    x_user_id: Optional[str] = Header(None, alias="X-User-Id"),
    context: ServingContext = Depends(get_context),
):
    user_id = user_header(x_user_id)
    try:
        label, probs = predict(context.victim, context.graph, node_id)
        ego = ego_subgraph(context.graph, node_id)
    except InvalidNodeError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))

    monitor_view = None
    if context.monitor is not None:
        track = context.monitor.observe(user_id, node_id)
        monitor_view = DecisionView(
            user_id=user_id,
            steps=track.state.step,
            action_probs=track.probs.tolist(),
            decision=decision_name(track),
        )

    return QueryResponse(
        node_id=node_id,
        label=label,
        probabilities=[float(p) for p in probs],
        subgraph=SubgraphView(
            center=ego.center,
            members=ego.ordered_members,
            edges=[(int(u), int(v)) for u, v in ego.edges],
        ),
        monitor=monitor_view,
    )
