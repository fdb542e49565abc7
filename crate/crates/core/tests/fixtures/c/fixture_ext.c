#include <stddef.h>
#include <stdint.h>
#include <string.h>

struct item {
    int kind;
    const char *text;
};

int ext_counter = 0;

static char *print_impl(const struct item *it, int formatted)
{
    if (it == NULL)
        return NULL;
    ext_counter += formatted + it->kind;
    return (char *)it->text;
}

char *cJSON_Print(const struct item *it)
{
    return print_impl(it, 0);
}

__attribute__((weak)) int weak_hook(int x)
{
    return x * 3;
}

long sum7(long a, long b, long c, long d, long e, long f, long g)
{
    return a + b + c + d + e + f + g;
}

void noop_sink(int x)
{
    (void)x;
}

int __internal_reset(int x)
{
    ext_counter = x;
    return 0;
}

size_t str_len_wrap(const char *s)
{
    return strlen(s);
}

__attribute__((visibility("hidden"))) int hidden_fn(int x)
{
    return x + 1;
}

int uses_hidden(int x)
{
    return hidden_fn(x);
}
