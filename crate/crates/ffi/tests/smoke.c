#include <stdio.h>
#include <string.h>
#include "agentrl.h"

int main(void) {
    AgentrlCatalog *cat = NULL;
    size_t n = 0;
    if (agentrl_catalog_builtin(0, &cat) != AGENTRL_STATUS_OK) return 1;
    if (agentrl_catalog_len(cat, &n) != AGENTRL_STATUS_OK || n != 60) return 2;
    char id[64];
    if (agentrl_catalog_task_id(cat, 0, id, sizeof id, NULL) != AGENTRL_STATUS_OK) return 3;
    if (strcmp(id, "calc-easy-0") != 0) return 4;
    agentrl_catalog_free(cat);

    AgentrlPolicy *p = NULL;
    if (agentrl_policy_new("{\"d_model\": 3}", 0, &p) != AGENTRL_STATUS_CONFIG) return 5;
    char msg[256];
    agentrl_last_error(msg, sizeof msg, NULL);
    if (strlen(msg) == 0) return 6;
    if (agentrl_policy_new(NULL, 0, &p) != AGENTRL_STATUS_OK) return 7;
    uint32_t ctx[] = {0, 1, 20};
    uint32_t act[] = {21, 7};
    double lp = 0.0;
    if (agentrl_policy_log_prob(p, ctx, 3, act, 2, &lp) != AGENTRL_STATUS_OK || !(lp < 0.0)) return 8;
    agentrl_policy_free(p);
    printf("ok %.6f\n", lp);
    return 0;
}
